#pragma once

// Procedural panorama corpus with known ground-truth symmetry.

#include "core/geometry.hpp"
#include "core/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace spheregen {

// Registry names plus "asym".
const std::vector<std::string>& scene_labels();
// nullopt for "asym"; UsageError for unknown labels.
std::optional<SymmetryType> label_symmetry(const std::string& label);

struct SceneRecipe {
    std::string label = "asym";
    std::uint64_t seed = 0;
    std::size_t blobs = 4;
    std::size_t stripes = 3;
    double horizon = 0.6; // colatitude of the horizon as a fraction of pi
    std::size_t height = 64;

    void validate() const;
};

nlohmann::json to_json(const SceneRecipe& r);
SceneRecipe scene_recipe_from_json(const nlohmann::json& j);

// Random element counts and horizon for a label, from the seed.
SceneRecipe random_recipe(const std::string& label, std::uint64_t seed, std::size_t height);

// [3 x H x 2H] in [0, 1]. Symmetric labels are exactly invariant under
// their transform.
Tensor render_scene(const SceneRecipe& r);

// Smallest mean |T(img) - img| over the registry.
double min_asymmetry(const Tensor& img);
inline constexpr double k_asym_threshold = 0.01;

// Relative label weights, e.g. {"rot180": 1, "asym": 2}.
using LabelMix = std::map<std::string, double>;
LabelMix uniform_mix();
// "uniform" or "label=weight,label=weight,...".
LabelMix parse_mix(const std::string& text);

struct CorpusItem {
    std::string id;
    std::string file; // relative to the corpus directory
    std::string label;
    std::string split; // train | test | val
    SceneRecipe recipe;
};

struct CorpusSummary {
    std::size_t total = 0;
    std::map<std::string, std::size_t> per_label;
    std::map<std::string, std::size_t> per_split;
    std::string manifest_sha; // FNV-1a hex of the manifest bytes
};

// Integer label counts summing to n (largest remainder).
std::map<std::string, std::size_t> label_counts(std::size_t n, const LabelMix& mix);
// Train / test / val sizes in the ratio 50 : 10 : 5.
std::array<std::size_t, 3> split_sizes(std::size_t n);

// Writes <dir>/images/<id>.png and <dir>/manifest.jsonl. A non-empty
// directory is an error unless force is set.
CorpusSummary build_corpus(const std::string& dir, std::size_t n, const LabelMix& mix, std::uint64_t seed,
                           std::size_t height, bool force = false);

std::vector<CorpusItem> read_manifest(const std::string& dir);

struct LoadedSplit {
    std::vector<Tensor> images; // [3 x H x 2H]
    std::vector<CorpusItem> items;
};
// Loads one split ("train", "test", "val" or "all"), checking the resolution.
LoadedSplit load_split(const std::string& dir, const std::string& split, std::size_t expected_height);

} // namespace spheregen

#pragma once

// Command implementations behind the CLI: dataset creation, training,
// generation, NFOV cropping and evaluation. Paths are used as given.

#include "core/config.hpp"
#include "core/evaluation.hpp"
#include "core/training.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace spheregen {

struct MakeDatasetOptions {
    std::string out;
    std::size_t n = 600;
    std::string mix = "uniform";
    std::uint64_t seed = 0;
    std::size_t height = 64;
    bool force = false;
};
nlohmann::json make_dataset(const MakeDatasetOptions& o);

struct TrainOptions {
    std::string data;
    std::string split = "train";
    std::string checkpoint;      // output
    std::string metrics;         // JSON-lines output
    std::string resume;          // optional checkpoint to continue from
    std::size_t log_every = 10;  // progress callback interval
};
using ProgressFn = std::function<void(const StepMetrics&)>;
// On resume the model and training settings come from the checkpoint; only
// the total step count is taken from cfg.
nlohmann::json train(const RunConfig& cfg, const TrainOptions& o, const ProgressFn& progress = {});

struct ViewArgs {
    double lon = 0.0; // degrees
    double lat = 0.0; // degrees
    double fov = 90.0;

    ViewSpec spec() const;
};

struct GenerateOptions {
    std::string checkpoint;
    std::string input;        // square NFOV PNG
    ViewArgs view;
    SymmetryParams s;
    std::uint64_t seed = 0;
    std::string out;
    std::string partial_out;  // optional: the projected partial panorama
};
nlohmann::json generate_command(const GenerateOptions& o);

struct CropOptions {
    std::string input; // panorama PNG
    ViewArgs view;
    std::size_t size = 128;
    std::string out;
};
nlohmann::json crop_nfov(const CropOptions& o);

struct EvaluateOptions {
    // "checkpoint" or "echo" (returns the ground truths unchanged).
    std::string model = "checkpoint";
    // One checkpoint, or for ablations one per column in column order.
    std::vector<std::string> checkpoints;
    std::string data;
    std::string split = "test";
    std::size_t max_samples = 0; // 0 = whole split
    std::uint64_t seed = 0;
    std::string out_dir;
    std::string ablation = "none"; // none | loss | padding
    std::vector<std::string> targets = sweep_targets();
    std::vector<double> levels = k_sweep_levels;
    std::optional<SymmetryParams> quality_s; // default: every entry = mu_s
    std::string extractor;                   // optional weights file
    bool montage = false;
    bool sweep = true;
};
nlohmann::json evaluate(const EvaluateOptions& o);

// Per-network parameter counts.
nlohmann::json describe_model(const Model& model);

} // namespace spheregen

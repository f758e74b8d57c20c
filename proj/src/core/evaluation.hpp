#pragma once

// Symmetry metric (SEM), Frechet distance, seam discontinuity and the
// symmetry sweep harness.

#include "core/symmetry.hpp"
#include "core/tensor.hpp"
#include "core/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace spheregen {

// Frozen, seed-initialized convolutional feature map: three blocks of 3x3
// convolution (circular padding, mirror-symmetric kernels) and 2x2 average
// pooling, leaky ReLU between. Equivariant under every registry transform
// when the width is a multiple of 32.
class FeatureExtractor {
public:
    static constexpr std::uint64_t k_default_seed = 0x5E3A11;

    explicit FeatureExtractor(std::uint64_t seed = k_default_seed, std::vector<std::size_t> channels = {16, 32, 32});
    // Weights file written by save(); lets a different extractor be dropped in.
    static FeatureExtractor load(const std::string& path);
    void save(const std::string& path) const;

    // [C x H x W] image -> [C_e x H/8 x W/8] map.
    Tensor raw_features(const Tensor& image) const;
    // raw_features with each channel's spatial mean removed (used by SEM).
    Tensor features(const Tensor& image) const;
    // Per-channel spatial mean and standard deviation of raw_features.
    std::vector<double> pooled(const Tensor& image) const;
    std::size_t pooled_dim() const { return 2 * channels_.back(); }
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::vector<std::size_t> channels_;
    std::vector<Tensor> weights_, biases_;
};

// Cosine similarity between a feature map and its transform.
double sem_features(const Tensor& features, const SymmetryType& t);
double sem(const Tensor& image, const SymmetryType& t, const FeatureExtractor& fe);
// Mean of SEM over the 90, 180 and 270 degree rotations.
double sem_rotations(const Tensor& image, const FeatureExtractor& fe);

// Sweep targets: "rot90" is the composite rotation target.
std::vector<std::string> sweep_targets();
double sem_target(const Tensor& image, const std::string& target, const FeatureExtractor& fe);
// Target entry (or the three rotation entries for "rot90") set to level,
// all others to `other`.
SymmetryParams sweep_params(const std::string& target, double level, double other = 0.3);

// Rows are samples. ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with
// 1e-6 I added to both covariances.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
inline constexpr double k_fid_regularization = 1e-6;

// mean |col 0 - col W-1| / mean |col j+1 - col j| over the interior.
double seam_discontinuity(const Tensor& image);

struct Quartiles {
    double q1 = 0.0, median = 0.0, q3 = 0.0, mean = 0.0;
};
Quartiles quartiles(std::vector<double> values);

// Held-out evaluation sample: the ground truth and its partial view.
struct EvalSample {
    Tensor ground_truth;
    PartialInput partial;
};
std::vector<EvalSample> make_eval_samples(std::span<const Tensor> panoramas, std::uint64_t seed);

// Produces one panorama per sample for the given s.
using Generator = std::function<std::vector<Tensor>(const std::vector<EvalSample>&, const SymmetryParams&, std::uint64_t)>;
Generator model_generator(const Model& model, std::size_t chunk = 8);
// Returns each sample's ground truth unchanged.
Generator echo_generator();

struct SweepCell {
    std::string target;
    double level = 0.0;
    std::vector<double> sems;
    Quartiles stats;
};

struct SweepReport {
    std::vector<double> levels;
    std::vector<SweepCell> cells;
    bool untrained = false;

    const SweepCell& cell(const std::string& target, double level) const;
};

inline const std::vector<double> k_sweep_levels{0.0, 0.25, 0.5, 0.75, 1.0};

SweepReport symmetry_sweep(const Generator& gen, const std::vector<EvalSample>& samples,
                           const std::vector<std::string>& targets, const std::vector<double>& levels,
                           const FeatureExtractor& fe, std::uint64_t seed);

struct QualityReport {
    double fid = 0.0;
    Quartiles seam;
    Quartiles seam_reference; // of the ground truths
    std::size_t samples = 0;
};

// FID of generations at s against the ground truths, plus seam statistics.
QualityReport quality_report(const Generator& gen, const std::vector<EvalSample>& samples, const SymmetryParams& s,
                             const FeatureExtractor& fe, std::uint64_t seed);

nlohmann::json to_json(const SweepReport& r);
nlohmann::json to_json(const QualityReport& r);
std::string sweep_csv(const SweepReport& r);

// Grid of images (rows x cols, row-major), all of equal shape [3 x H x W].
Tensor montage(const std::vector<Tensor>& images, std::size_t cols);

} // namespace spheregen

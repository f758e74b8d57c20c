#pragma once

// Dual-path training (reconstruction + generation), sampling, and
// checkpoints.

#include "core/config.hpp"
#include "core/nn.hpp"
#include "core/objective.hpp"
#include "core/symmetry.hpp"

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace spheregen {

struct TrainBatch {
    Tensor x_g;  // [N x 3 x H x W]
    Tensor x_l;  // [N x 3 x H x W], gray outside the view
    Tensor mask; // [N x 1 x H x W]
    std::vector<ViewSpec> views;

    std::size_t size() const { return views.size(); }
};

// Crops each view out of its panorama ([3 x H x W] each).
TrainBatch make_batch(std::span<const Tensor> panoramas, std::span<const ViewSpec> views);

// Center uniform on the sphere, fov uniform in [30, 120] degrees, 1:1, no roll.
ViewSpec random_view(std::mt19937_64& rng);

struct StepMetrics {
    std::size_t step = 0;
    double l_rec = 0.0;
    double l_gen = 0.0;
    double l_d = 0.0;
    double kl_z = 0.0;         // per-item KL (after reduction)
    double log_prior_s = 0.0;  // per-item log p(s_est)
    double rec_l1 = 0.0;       // mean |x_g - x_hat|
    double rec_masked_l1 = 0.0; // mean |x_g - x_hat| inside the view
    double gen_masked_l1 = 0.0; // mean |x_l - x_tilde| inside the view
    double objective = 0.0;    // generator objective (maximized)
    std::array<double, k_num_symmetries> s_mean{};
    std::array<double, k_num_symmetries> s_std{};
};

// Noise for one generator pass: eps_q for the posterior sample (rec path),
// eps_p and s_tilde for the prior sample (gen path). Unused entries may be
// empty.
struct PassNoise {
    Tensor eps_q;   // latent shape
    Tensor eps_p;   // latent shape
    Tensor s_tilde; // [N x 5], in [0, 1]
};

// Graph of the generator objective for one batch.
struct GeneratorPass {
    ag::Var objective; // scalar: mean over items of gamma L_rec + (1 - gamma) L_gen
    ag::Var l_rec, l_gen; // [N]; undefined when the mode excludes them
    ag::Var kl, log_prior_s;
    ag::Var s_est;
    ag::Var x_hat, x_tilde;
    ag::Var d_real; // D(x_g) with its graph, when the rec path ran
};

GeneratorPass generator_pass(const Model& model, const TrainBatch& batch, LossMode mode, const PassNoise& noise);

class Adam {
public:
    Adam() = default;
    Adam(double lr, double beta1, double beta2, double eps);
    // Applies one update to every parameter of the store from its grad.
    void step(ParamStore& store);

    std::size_t t = 0;
    std::vector<Tensor> m, v;

private:
    double lr_ = 1e-4, beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
};

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg);

    StepMetrics train_step(const TrainBatch& batch);
    // Samples a batch from the panoramas with random views and steps once.
    StepMetrics train_step(std::span<const Tensor> panoramas);

    Model& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }
    std::size_t step() const { return step_; }
    std::mt19937_64& rng() { return rng_; }

    Adam& generator_optimizer() { return gen_opt_; }
    Adam& discriminator_optimizer() { return disc_opt_; }
    const Adam& generator_optimizer() const { return gen_opt_; }
    const Adam& discriminator_optimizer() const { return disc_opt_; }
    const Model& model() const { return model_; }
    void restore(std::size_t step, const std::string& rng_state);
    std::string rng_state() const;

private:
    Tensor normal_like(const Shape& shape);
    Tensor sample_symmetry(std::size_t n);

    Model& model_;
    TrainConfig cfg_;
    std::mt19937_64 rng_;
    std::size_t step_ = 0;
    Adam gen_opt_, disc_opt_;
};

// Generated panorama [3 x H x W] from a partial input; z is sampled from the
// conditional prior with the given seed.
struct PartialInput {
    Tensor image; // [3 x H x W]
    Tensor mask;  // [H x W]
    SphereDirection center;
};
Tensor generate(const Model& model, const PartialInput& input, const SymmetryParams& s, std::uint64_t seed);
// Batched variant; all inputs share s. Item n uses seed + n.
std::vector<Tensor> generate_batch(const Model& model, std::span<const PartialInput> inputs, const SymmetryParams& s,
                                   std::uint64_t seed);

// Reconstruction-path output for a single pair (posterior mean z, estimated s).
Tensor reconstruct(const Model& model, const PartialInput& input, const Tensor& x_g);

// The five paper symmetry presets with h = 1.0, l = 0.3.
SymmetryParams symmetry_preset(const std::string& name);
std::vector<std::string> symmetry_preset_names();

// ---------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t k_checkpoint_version = 1;

void save_checkpoint(const std::string& path, const Model& model, const Trainer* trainer = nullptr);

struct TrainerSnapshot {
    TrainConfig config;
    std::size_t step = 0;
    std::string rng_state;
    Adam generator, discriminator;
};

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    std::optional<TrainerSnapshot> trainer;
};

// Throws DataError on a missing, truncated or corrupt file, a version
// mismatch, or a symmetry registry that differs from this build's.
LoadedCheckpoint load_checkpoint(const std::string& path);
// Restores optimizer state and step counter into a trainer of the same model.
void restore_trainer(Trainer& trainer, const TrainerSnapshot& snap);

// ---------------------------------------------------------------- loop

nlohmann::json to_json(const StepMetrics& m);

struct TrainLoopOptions {
    std::string metrics_path;    // JSON-lines, appended
    std::string checkpoint_path; // written every checkpoint_every steps and at the end
    std::function<void(const StepMetrics&)> on_step;
};

// Runs steps until trainer.step() == cfg.steps. Returns the last metrics.
StepMetrics run_training(Trainer& trainer, std::span<const Tensor> panoramas, const TrainLoopOptions& opts);

} // namespace spheregen

#pragma once

// Convolutional networks of the generator and discriminator, all built
// from residual blocks with circular padding (RBCP).

#include "core/autograd.hpp"
#include "core/geometry.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace spheregen {

enum class Reduction { sum, mean };

struct ModelConfig {
    std::string preset = "desk";
    std::size_t height = 64; // width is always 2 * height
    std::size_t image_channels = 3;
    // encoder_channels[0]: the two standard blocks; [k]: k-th down block.
    std::vector<std::size_t> encoder_channels{8, 16, 32, 32, 32};
    std::size_t prior_layers = 7; // shared trunk = prior_layers - 1
    std::vector<std::size_t> discriminator_channels{8, 16, 32};
    std::size_t patch_grid = 6;
    std::size_t attention_block = 3;
    bool attention = true;

    // Objective.
    double alpha = -1.0;
    double beta = -20.0;
    double gamma = 0.5;
    double kappa = 3.0;
    double mu_s = 0.50;
    double sigma_s = 0.33;
    Reduction reduction = Reduction::mean;
    bool square_rec_adversarial = false;

    // Ablation toggles that change the architecture.
    bool circular_padding = true;
    bool symmetry_control = true;
    bool weight_w = true;

    static ModelConfig desk();
    static ModelConfig paper();
    // Small configuration for tests and the overfit check.
    static ModelConfig tiny(std::size_t height = 32);

    std::size_t width() const { return 2 * height; }
    std::size_t encoder_down() const { return encoder_channels.size() - 1; }
    std::size_t latent_channels() const { return encoder_channels.back(); }
    // Spatial sizes of f_e, f_l (= z) and f_s.
    std::pair<std::size_t, std::size_t> fe_size() const;
    std::pair<std::size_t, std::size_t> fl_size() const;
    std::pair<std::size_t, std::size_t> fs_size() const;
    std::size_t fe_channels() const;
    std::pair<std::size_t, std::size_t> discriminator_feature_size() const;

    // Throws UsageError on any inconsistent value.
    void validate() const;
};

struct RBCPSpec {
    enum class Mode { standard, down, up };
    Mode mode = Mode::standard;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
};

class ParamStore {
public:
    ag::Var add(const std::string& path, Tensor init);
    const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
    ag::Var find(const std::string& path) const;
    std::size_t count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, ag::Var>> entries_;
};

struct InitContext {
    ParamStore& store;
    std::mt19937_64& rng;
    ag::PadMode pad;
};

struct Conv2d {
    std::string path;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    ag::PadMode pad = ag::PadMode::circular;
    ag::Var weight, bias;

    Conv2d() = default;
    Conv2d(InitContext& ctx, const std::string& path, std::size_t in, std::size_t out, std::size_t kernel,
           std::size_t stride);
    ag::Var forward(const ag::Var& x) const;
};

struct InstanceNorm {
    ag::Var gamma, beta;
    InstanceNorm() = default;
    InstanceNorm(InitContext& ctx, const std::string& path, std::size_t channels);
    ag::Var forward(const ag::Var& x) const;
};

using ConvVisitor = std::function<void(const Conv2d&)>;

// Pre-activation residual block:
//   main: norm -> lrelu -> [up] -> conv -> norm -> lrelu -> conv[stride 2 if down]
//   skip: [up | avgpool] -> 1x1 conv when channels change.
class RBCP {
public:
    RBCP() = default;
    RBCP(InitContext& ctx, const std::string& path, RBCPSpec spec);
    ag::Var forward(const ag::Var& x) const;
    const RBCPSpec& spec() const { return spec_; }
    void visit_convs(const ConvVisitor& v) const;

private:
    RBCPSpec spec_;
    InstanceNorm norm1_, norm2_;
    Conv2d conv1_, conv2_;
    bool has_skip_ = false;
    Conv2d skip_;
};

class SelfAttention {
public:
    SelfAttention() = default;
    SelfAttention(InitContext& ctx, const std::string& path, std::size_t channels);
    ag::Var forward(const ag::Var& x) const;

private:
    ag::Var wq_, wk_, wv_, gamma_;
};

struct FeatureBundle {
    ag::Var f_e; // hidden-layer features
    ag::Var f_l; // last-layer features
};

// Posterior/prior log-variances are squashed into (-bound, bound).
inline constexpr double k_logvar_bound = 4.0;

struct LatentGaussian {
    ag::Var mu;
    ag::Var logvar;
    ag::Var sigma() const { return ag::exp(ag::mul_scalar(logvar, 0.5)); }
};

class Encoder {
public:
    Encoder() = default;
    Encoder(InitContext& ctx, const ModelConfig& cfg);
    FeatureBundle forward(const ag::Var& x) const;
    void visit_convs(const ConvVisitor& v) const;
    std::size_t num_blocks() const { return blocks_.size(); }

private:
    std::vector<RBCP> blocks_;
    std::size_t fe_index_ = 0;
    std::size_t height_ = 0;
};

class PosteriorHeads {
public:
    PosteriorHeads() = default;
    PosteriorHeads(InitContext& ctx, const ModelConfig& cfg);
    LatentGaussian forward(const ag::Var& f_l) const;
    void visit_convs(const ConvVisitor& v) const;

private:
    RBCP mu_, logvar_;
};

class PriorHeads {
public:
    PriorHeads() = default;
    PriorHeads(InitContext& ctx, const ModelConfig& cfg);
    LatentGaussian forward(const ag::Var& f_l) const;
    void visit_convs(const ConvVisitor& v) const;

private:
    std::vector<RBCP> trunk_;
    RBCP mu_, logvar_;
};

class SymmetryHead {
public:
    SymmetryHead() = default;
    SymmetryHead(InitContext& ctx, const ModelConfig& cfg);
    ag::Var features(const ag::Var& f_l) const; // f_s
    ag::Var estimate(const ag::Var& f_l) const; // [N x 5]
    void visit_convs(const ConvVisitor& v) const;
    const ag::Var& zeta() const { return zeta_; }
    const ag::Var& eta() const { return eta_; }

private:
    RBCP block_;
    ag::Var zeta_, eta_;
};

// Inputs to the decoder beyond the encoder features.
struct DecoderControl {
    ag::Var s;        // [N x 5]
    ag::Var w_latent; // [N x 1 x h_l x w_l]
    ag::Var w_hidden; // [N x 1 x h_e x w_e]
};

class Decoder {
public:
    Decoder() = default;
    Decoder(InitContext& ctx, const ModelConfig& cfg);
    ag::Var forward(const ag::Var& f_e, const ag::Var& f_l, const ag::Var& z, const DecoderControl& ctl) const;
    void visit_convs(const ConvVisitor& v) const;

private:
    bool symmetry_control_ = true;
    bool attention_enabled_ = true;
    std::size_t concat_after_ = 0; // index into ups_
    RBCP first_;
    std::vector<RBCP> ups_;
    SelfAttention attention_;
    InstanceNorm out_norm_;
    Conv2d out_conv_;
};

class Discriminator {
public:
    Discriminator() = default;
    Discriminator(InitContext& ctx, const ModelConfig& cfg);
    // [N x 3 x H x W] -> [N x 1 x 6 x 6] confidences.
    ag::Var forward(const ag::Var& x) const;
    void visit_convs(const ConvVisitor& v) const;

private:
    std::vector<RBCP> blocks_;
    bool attention_enabled_ = true;
    std::size_t attention_after_ = 0;
    SelfAttention attention_;
    Conv2d out_conv_;
    std::size_t patch_grid_ = 6;
    std::size_t height_ = 0;
};

// The full parameter set: generator side (F, heads, F_s, estimator, G) plus D.
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    const Encoder& encoder() const { return encoder_; }
    const PosteriorHeads& posterior() const { return posterior_; }
    const PriorHeads& prior() const { return prior_; }
    const SymmetryHead& symmetry_head() const { return symmetry_head_; }
    const Decoder& decoder() const { return decoder_; }
    const Discriminator& discriminator() const { return discriminator_; }

    ParamStore& generator_params() { return gen_store_; }
    ParamStore& discriminator_params() { return disc_store_; }
    const ParamStore& generator_params() const { return gen_store_; }
    const ParamStore& discriminator_params() const { return disc_store_; }

    // Every convolution of every network, in construction order.
    void visit_convs(const ConvVisitor& v) const;

private:
    ModelConfig cfg_;
    std::uint64_t seed_ = 0;
    ParamStore gen_store_;
    ParamStore disc_store_;
    Encoder encoder_;
    PosteriorHeads posterior_;
    PriorHeads prior_;
    SymmetryHead symmetry_head_;
    Decoder decoder_;
    Discriminator discriminator_;
};

// [N x 1 x h x w] weight maps for a batch of view centers, area-averaged
// from the image grid. kappa = 0 (or weight_w off) gives ones.
Tensor batch_weight_maps(const EquirectGrid& grid, std::span<const SphereDirection> centers, double kappa,
                         std::size_t h, std::size_t w);

// FNV-1a over the parameter bytes in store order.
std::uint64_t hash_params(const ParamStore& store);

} // namespace spheregen

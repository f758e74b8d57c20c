#include "core/nn.hpp"

#include "core/errors.hpp"
#include "core/symmetry.hpp"

#include <cmath>
#include <cstring>

namespace spheregen {

namespace {

constexpr double k_leaky_slope = 0.2;

void usage_check(bool cond, const std::string& what)
{
    if (!cond) {
        throw UsageError("invalid model config: " + what);
    }
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng)
{
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) {
        v = dist(rng);
    }
    return t;
}

std::size_t pow2(std::size_t k) { return std::size_t{1} << k; }

// Soft bound of log-variances to (-b, b): b * tanh(x / b).
ag::Var bounded_logvar(const ag::Var& raw)
{
    const double b = k_logvar_bound;
    return ag::add_scalar(ag::mul_scalar(ag::sigmoid(ag::mul_scalar(raw, 2.0 / b)), 2.0 * b), -b);
}

} // namespace

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper()
{
    ModelConfig c;
    c.preset = "paper";
    c.height = 256;
    c.encoder_channels = {32, 64, 128, 128, 128, 128};
    c.discriminator_channels = {32, 64, 128, 128, 128};
    return c;
}

ModelConfig ModelConfig::tiny(std::size_t height)
{
    ModelConfig c;
    c.preset = "tiny";
    c.height = height;
    c.encoder_channels = {4, 8, 8, 8};
    c.prior_layers = 2;
    c.discriminator_channels = {4, 8};
    return c;
}

std::pair<std::size_t, std::size_t> ModelConfig::fe_size() const
{
    const std::size_t f = pow2(encoder_down() - 2);
    return {height / f, width() / f};
}

std::pair<std::size_t, std::size_t> ModelConfig::fl_size() const
{
    const std::size_t f = pow2(encoder_down());
    return {height / f, width() / f};
}

std::pair<std::size_t, std::size_t> ModelConfig::fs_size() const
{
    const std::size_t f = pow2(encoder_down() + 1);
    return {height / f, width() / f};
}

std::size_t ModelConfig::fe_channels() const { return encoder_channels[encoder_down() - 2]; }

std::pair<std::size_t, std::size_t> ModelConfig::discriminator_feature_size() const
{
    const std::size_t f = pow2(discriminator_channels.size());
    return {height / f, width() / f};
}

void ModelConfig::validate() const
{
    usage_check(height >= 8, "height must be at least 8");
    usage_check(image_channels >= 1, "image_channels must be positive");
    usage_check(encoder_channels.size() >= 3, "encoder needs at least two down-sampling blocks");
    for (auto c : encoder_channels) {
        usage_check(c >= 1, "encoder channel widths must be positive");
    }
    const std::size_t levels = encoder_down() + 1; // f_s is one halving below f_l
    usage_check(height % pow2(levels) == 0,
                "height " + std::to_string(height) + " not divisible by 2^" + std::to_string(levels));
    for (std::size_t k = 0; k <= levels; ++k) {
        const std::size_t w = width() / pow2(k);
        usage_check(w % 4 == 0 && registry_compatible(w),
                    "feature width " + std::to_string(w) + " at level " + std::to_string(k) +
                        " is not a multiple of 4 (symmetry transforms must be exact)");
    }
    usage_check(prior_layers >= 1, "prior_layers must be >= 1");
    usage_check(!discriminator_channels.empty(), "discriminator needs at least one block");
    for (auto c : discriminator_channels) {
        usage_check(c >= 1, "discriminator channel widths must be positive");
    }
    usage_check(height % pow2(discriminator_channels.size()) == 0, "height not divisible for discriminator");
    usage_check(patch_grid >= 1, "patch_grid must be positive");
    usage_check(attention_block >= 1, "attention_block must be positive");
    usage_check(alpha <= 0.0 && std::isfinite(alpha), "alpha must be <= 0");
    usage_check(beta <= 0.0 && std::isfinite(beta), "beta must be <= 0");
    usage_check(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    usage_check(std::isfinite(kappa) && kappa >= 0.0, "kappa must be finite and >= 0");
    usage_check(std::isfinite(mu_s), "mu_s must be finite");
    usage_check(sigma_s > 0.0 && std::isfinite(sigma_s), "sigma_s must be positive");
}

// ---------------------------------------------------------------- params

ag::Var ParamStore::add(const std::string& path, Tensor init)
{
    require(!find(path).defined(), "duplicate parameter path " + path);
    ag::Var v(std::move(init), true);
    entries_.emplace_back(path, v);
    return v;
}

ag::Var ParamStore::find(const std::string& path) const
{
    for (const auto& [name, v] : entries_) {
        if (name == path) {
            return v;
        }
    }
    return {};
}

std::size_t ParamStore::count() const
{
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.second.numel();
    }
    return n;
}

void ParamStore::zero_grad()
{
    for (auto& e : entries_) {
        e.second.zero_grad();
    }
}

std::uint64_t hash_params(const ParamStore& store)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, v] : store.entries()) {
        for (double d : v.value().values()) {
            std::uint64_t bits = 0;
            std::memcpy(&bits, &d, sizeof bits);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffU;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------- layers

Conv2d::Conv2d(InitContext& ctx, const std::string& p, std::size_t in, std::size_t out, std::size_t k, std::size_t s)
    : path(p), kernel(k), stride(s), pad(ctx.pad)
{
    const double fan_in = static_cast<double>(in * k * k);
    const double stddev = std::sqrt(2.0 / ((1.0 + k_leaky_slope * k_leaky_slope) * fan_in));
    weight = ctx.store.add(p + ".weight", normal_tensor({out, in, k, k}, stddev, ctx.rng));
    bias = ctx.store.add(p + ".bias", Tensor({out}, 0.0));
}

ag::Var Conv2d::forward(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

InstanceNorm::InstanceNorm(InitContext& ctx, const std::string& path, std::size_t channels)
    : gamma(ctx.store.add(path + ".gamma", Tensor({channels}, 1.0))),
      beta(ctx.store.add(path + ".beta", Tensor({channels}, 0.0)))
{
}

ag::Var InstanceNorm::forward(const ag::Var& x) const { return ag::instance_norm(x, gamma, beta); }

RBCP::RBCP(InitContext& ctx, const std::string& path, RBCPSpec spec) : spec_(spec)
{
    require(spec.kernel % 2 == 1, "RBCP kernel must be odd");
    using Mode = RBCPSpec::Mode;
    norm1_ = InstanceNorm(ctx, path + ".norm1", spec.in_channels);
    conv1_ = Conv2d(ctx, path + ".conv1", spec.in_channels, spec.out_channels, spec.kernel, 1);
    norm2_ = InstanceNorm(ctx, path + ".norm2", spec.out_channels);
    conv2_ = Conv2d(ctx, path + ".conv2", spec.out_channels, spec.out_channels, spec.kernel,
                    spec.mode == Mode::down ? 2 : 1);
    has_skip_ = spec.in_channels != spec.out_channels;
    if (has_skip_) {
        skip_ = Conv2d(ctx, path + ".skip", spec.in_channels, spec.out_channels, 1, 1);
    }
}

ag::Var RBCP::forward(const ag::Var& x) const
{
    using Mode = RBCPSpec::Mode;
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != spec_.in_channels) {
        domain_fail("RBCP: input " + shape_string(s) + " does not match in_channels " +
                    std::to_string(spec_.in_channels));
    }
    if (spec_.mode == Mode::down && (s[2] % 2 != 0 || s[3] % 2 != 0)) {
        domain_fail("RBCP(d): spatial dims must be even, got " + shape_string(s));
    }
    ag::Var h = ag::leaky_relu(norm1_.forward(x), k_leaky_slope);
    if (spec_.mode == Mode::up) {
        h = ag::upsample_nearest2x(h);
    }
    h = conv1_.forward(h);
    h = ag::leaky_relu(norm2_.forward(h), k_leaky_slope);
    h = conv2_.forward(h);

    ag::Var skip = x;
    if (spec_.mode == Mode::up) {
        skip = ag::upsample_nearest2x(skip);
    } else if (spec_.mode == Mode::down) {
        skip = ag::avg_pool2x2(skip);
    }
    if (has_skip_) {
        skip = skip_.forward(skip);
    }
    return ag::add(h, skip);
}

void RBCP::visit_convs(const ConvVisitor& v) const
{
    v(conv1_);
    v(conv2_);
    if (has_skip_) {
        v(skip_);
    }
}

SelfAttention::SelfAttention(InitContext& ctx, const std::string& path, std::size_t channels)
{
    const std::size_t cq = std::max<std::size_t>(1, channels / 8);
    const double sd = 1.0 / std::sqrt(static_cast<double>(channels));
    wq_ = ctx.store.add(path + ".query", normal_tensor({cq, channels}, sd, ctx.rng));
    wk_ = ctx.store.add(path + ".key", normal_tensor({cq, channels}, sd, ctx.rng));
    wv_ = ctx.store.add(path + ".value", normal_tensor({channels, channels}, sd, ctx.rng));
    gamma_ = ctx.store.add(path + ".gate", Tensor({1}, 0.0));
}

ag::Var SelfAttention::forward(const ag::Var& x) const { return ag::self_attention(x, wq_, wk_, wv_, gamma_); }

// ---------------------------------------------------------------- networks

Encoder::Encoder(InitContext& ctx, const ModelConfig& cfg) : height_(cfg.height)
{
    using Mode = RBCPSpec::Mode;
    const auto& ch = cfg.encoder_channels;
    blocks_.emplace_back(ctx, "encoder.block0", RBCPSpec{Mode::standard, cfg.image_channels, ch[0], 3});
    blocks_.emplace_back(ctx, "encoder.block1", RBCPSpec{Mode::standard, ch[0], ch[0], 3});
    for (std::size_t k = 1; k < ch.size(); ++k) {
        blocks_.emplace_back(ctx, "encoder.block" + std::to_string(k + 1), RBCPSpec{Mode::down, ch[k - 1], ch[k], 3});
    }
    // f_e is taken two layers before the last (layer 5 of 7 at the paper preset).
    fe_index_ = blocks_.size() - 3;
}

FeatureBundle Encoder::forward(const ag::Var& x) const
{
    const auto& s = x.shape();
    if (s.size() != 4 || s[2] != height_ || s[3] != 2 * height_) {
        domain_fail("encoder: input " + shape_string(s) + " does not match configured resolution " +
                    std::to_string(height_) + "x" + std::to_string(2 * height_));
    }
    FeatureBundle out;
    ag::Var h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = blocks_[i].forward(h);
        if (i == fe_index_) {
            out.f_e = h;
        }
    }
    out.f_l = h;
    return out;
}

void Encoder::visit_convs(const ConvVisitor& v) const
{
    for (const auto& b : blocks_) {
        b.visit_convs(v);
    }
}

PosteriorHeads::PosteriorHeads(InitContext& ctx, const ModelConfig& cfg)
{
    const std::size_t c = cfg.latent_channels();
    mu_ = RBCP(ctx, "posterior.mu", {RBCPSpec::Mode::standard, c, c, 3});
    logvar_ = RBCP(ctx, "posterior.logvar", {RBCPSpec::Mode::standard, c, c, 3});
}

LatentGaussian PosteriorHeads::forward(const ag::Var& f_l) const
{
    return {mu_.forward(f_l), bounded_logvar(logvar_.forward(f_l))};
}

void PosteriorHeads::visit_convs(const ConvVisitor& v) const
{
    mu_.visit_convs(v);
    logvar_.visit_convs(v);
}

PriorHeads::PriorHeads(InitContext& ctx, const ModelConfig& cfg)
{
    const std::size_t c = cfg.latent_channels();
    for (std::size_t i = 0; i + 1 < cfg.prior_layers; ++i) {
        trunk_.emplace_back(ctx, "prior.trunk" + std::to_string(i), RBCPSpec{RBCPSpec::Mode::standard, c, c, 3});
    }
    mu_ = RBCP(ctx, "prior.mu", {RBCPSpec::Mode::standard, c, c, 3});
    logvar_ = RBCP(ctx, "prior.logvar", {RBCPSpec::Mode::standard, c, c, 3});
}

LatentGaussian PriorHeads::forward(const ag::Var& f_l) const
{
    ag::Var h = f_l;
    for (const auto& b : trunk_) {
        h = b.forward(h);
    }
    return {mu_.forward(h), bounded_logvar(logvar_.forward(h))};
}

void PriorHeads::visit_convs(const ConvVisitor& v) const
{
    for (const auto& b : trunk_) {
        b.visit_convs(v);
    }
    mu_.visit_convs(v);
    logvar_.visit_convs(v);
}

SymmetryHead::SymmetryHead(InitContext& ctx, const ModelConfig& cfg)
{
    const std::size_t c = cfg.latent_channels();
    block_ = RBCP(ctx, "symmetry.head", {RBCPSpec::Mode::down, c, c, 3});
    const auto [h, w] = cfg.fs_size();
    zeta_ = ctx.store.add("symmetry.zeta", Tensor({1}, default_zeta(c * h * w)));
    eta_ = ctx.store.add("symmetry.eta", Tensor({1}, 0.0));
}

ag::Var SymmetryHead::features(const ag::Var& f_l) const { return block_.forward(f_l); }

ag::Var SymmetryHead::estimate(const ag::Var& f_l) const { return estimate_symmetry(features(f_l), zeta_, eta_); }

void SymmetryHead::visit_convs(const ConvVisitor& v) const { block_.visit_convs(v); }

Decoder::Decoder(InitContext& ctx, const ModelConfig& cfg)
    : symmetry_control_(cfg.symmetry_control), attention_enabled_(cfg.attention)
{
    using Mode = RBCPSpec::Mode;
    const auto& ch = cfg.encoder_channels;
    const std::size_t n = cfg.encoder_down();
    first_ = RBCP(ctx, "decoder.block0", {Mode::standard, ch[n], ch[n], 3});
    // The up block whose output matches f_e's resolution receives H(f_e, s);
    // with "block 1" being the standard block, that is decoder block 3.
    concat_after_ = 1;
    std::size_t in = ch[n];
    for (std::size_t k = 1; k <= n; ++k) {
        const std::size_t out = ch[n - k];
        ups_.emplace_back(ctx, "decoder.block" + std::to_string(k), RBCPSpec{Mode::up, in, out, 3});
        in = out;
        if (k - 1 == concat_after_) {
            in += cfg.fe_channels();
        }
    }
    if (attention_enabled_) {
        attention_ = SelfAttention(ctx, "decoder.attention", ch[n - 1 - concat_after_]);
    }
    out_norm_ = InstanceNorm(ctx, "decoder.out_norm", in);
    out_conv_ = Conv2d(ctx, "decoder.out_conv", in, cfg.image_channels, 3, 1);
}

ag::Var Decoder::forward(const ag::Var& f_e, const ag::Var& f_l, const ag::Var& z, const DecoderControl& ctl) const
{
    if (f_l.shape() != z.shape()) {
        domain_fail("decoder: z " + shape_string(z.shape()) + " does not match f_l " + shape_string(f_l.shape()));
    }
    ag::Var latent = ag::add(f_l, z);
    ag::Var hidden = f_e;
    if (symmetry_control_) {
        latent = symmetry_control(latent, ctl.s, ctl.w_latent);
        hidden = symmetry_control(hidden, ctl.s, ctl.w_hidden);
    }
    ag::Var h = first_.forward(latent);
    for (std::size_t k = 0; k < ups_.size(); ++k) {
        h = ups_[k].forward(h);
        if (k == concat_after_) {
            if (attention_enabled_) {
                h = attention_.forward(h);
            }
            if (h.shape()[2] != hidden.shape()[2] || h.shape()[3] != hidden.shape()[3]) {
                domain_fail("decoder: f_e " + shape_string(hidden.shape()) + " does not match hidden layer " +
                            shape_string(h.shape()));
            }
            h = ag::concat_channels(h, hidden);
        }
    }
    h = ag::leaky_relu(out_norm_.forward(h), k_leaky_slope);
    return ag::sigmoid(out_conv_.forward(h));
}

void Decoder::visit_convs(const ConvVisitor& v) const
{
    first_.visit_convs(v);
    for (const auto& b : ups_) {
        b.visit_convs(v);
    }
    v(out_conv_);
}

Discriminator::Discriminator(InitContext& ctx, const ModelConfig& cfg)
    : attention_enabled_(cfg.attention), patch_grid_(cfg.patch_grid), height_(cfg.height)
{
    const auto& ch = cfg.discriminator_channels;
    std::size_t in = cfg.image_channels;
    for (std::size_t k = 0; k < ch.size(); ++k) {
        blocks_.emplace_back(ctx, "discriminator.block" + std::to_string(k), RBCPSpec{RBCPSpec::Mode::down, in, ch[k], 3});
        in = ch[k];
    }
    attention_after_ = std::min(cfg.attention_block, blocks_.size()) - 1;
    if (attention_enabled_) {
        attention_ = SelfAttention(ctx, "discriminator.attention", ch[attention_after_]);
    }
    out_conv_ = Conv2d(ctx, "discriminator.out_conv", in, 1, 3, 1);
}

ag::Var Discriminator::forward(const ag::Var& x) const
{
    const auto& s = x.shape();
    if (s.size() != 4 || s[2] != height_ || s[3] != 2 * height_) {
        domain_fail("discriminator: input " + shape_string(s) + " does not match configured resolution");
    }
    ag::Var h = x;
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        h = blocks_[k].forward(h);
        if (attention_enabled_ && k == attention_after_) {
            h = attention_.forward(h);
        }
    }
    h = out_conv_.forward(ag::leaky_relu(h, k_leaky_slope));
    return ag::adaptive_avg_pool(h, patch_grid_, patch_grid_);
}

void Discriminator::visit_convs(const ConvVisitor& v) const
{
    for (const auto& b : blocks_) {
        b.visit_convs(v);
    }
    v(out_conv_);
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed)
{
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const ag::PadMode pad = cfg_.circular_padding ? ag::PadMode::circular : ag::PadMode::zero;
    InitContext gen{gen_store_, rng, pad};
    encoder_ = Encoder(gen, cfg_);
    posterior_ = PosteriorHeads(gen, cfg_);
    prior_ = PriorHeads(gen, cfg_);
    symmetry_head_ = SymmetryHead(gen, cfg_);
    decoder_ = Decoder(gen, cfg_);
    InitContext disc{disc_store_, rng, pad};
    discriminator_ = Discriminator(disc, cfg_);
}

void Model::visit_convs(const ConvVisitor& v) const
{
    encoder_.visit_convs(v);
    posterior_.visit_convs(v);
    prior_.visit_convs(v);
    symmetry_head_.visit_convs(v);
    decoder_.visit_convs(v);
    discriminator_.visit_convs(v);
}

Tensor batch_weight_maps(const EquirectGrid& grid, std::span<const SphereDirection> centers, double kappa,
                         std::size_t h, std::size_t w)
{
    Tensor out({centers.size(), 1, h, w});
    for (std::size_t n = 0; n < centers.size(); ++n) {
        const Tensor m = area_average(weight_map(grid, centers[n], kappa), h, w);
        std::copy(m.values().begin(), m.values().end(), out.data() + n * h * w);
    }
    return out;
}

} // namespace spheregen

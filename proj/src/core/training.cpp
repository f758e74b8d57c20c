#include "core/training.hpp"

#include "core/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace spheregen {

using nlohmann::json;

namespace {

void check_finite(double v, const char* what, std::size_t step)
{
    if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step));
    }
}

double mean_value(const ag::Var& v) { return ag::mean_all(ag::detach(v)).item(); }

// mean |a - b| over masked pixels; mask [N x 1 x H x W].
double masked_l1(const Tensor& a, const Tensor& b, const Tensor& mask)
{
    const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    double sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < c; ++k) {
            const double* pa = a.data() + (i * c + k) * hw;
            const double* pb = b.data() + (i * c + k) * hw;
            const double* pm = mask.data() + i * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                sum += pm[p] * std::abs(pa[p] - pb[p]);
                count += pm[p];
            }
        }
    }
    return count > 0.0 ? sum / count : 0.0;
}

struct WeightMaps {
    ag::Var latent, hidden;
};

WeightMaps weight_maps(const ModelConfig& cfg, std::span<const SphereDirection> centers)
{
    const EquirectGrid grid = EquirectGrid::from_height(cfg.height);
    const double kappa = cfg.weight_w ? cfg.kappa : 0.0;
    const auto [hl, wl] = cfg.fl_size();
    const auto [he, we] = cfg.fe_size();
    return {ag::constant(batch_weight_maps(grid, centers, kappa, hl, wl)),
            ag::constant(batch_weight_maps(grid, centers, kappa, he, we))};
}

Tensor symmetry_rows(const SymmetryParams& s, std::size_t n)
{
    Tensor out({n, k_num_symmetries});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(s.s.begin(), s.s.end(), out.data() + i * k_num_symmetries);
    }
    return out;
}

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng)
{
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.values()) {
        v = dist(rng);
    }
    return t;
}

} // namespace

// ---------------------------------------------------------------- batches

TrainBatch make_batch(std::span<const Tensor> panoramas, std::span<const ViewSpec> views)
{
    require(!panoramas.empty(), "make_batch: empty batch");
    require(panoramas.size() == views.size(), "make_batch: panorama / view count mismatch");
    const Shape& s0 = panoramas[0].shape();
    require(s0.size() == 3, "make_batch: panoramas must be [C x H x W], got " + shape_string(s0));
    const std::size_t n = panoramas.size(), c = s0[0], h = s0[1], w = s0[2];
    TrainBatch b;
    b.x_g = Tensor({n, c, h, w});
    b.x_l = Tensor({n, c, h, w});
    b.mask = Tensor({n, 1, h, w});
    b.views.assign(views.begin(), views.end());
    for (std::size_t i = 0; i < n; ++i) {
        require(panoramas[i].shape() == s0, "make_batch: panoramas differ in shape");
        const PartialImage p = nfov_to_equirect(panoramas[i], views[i]);
        std::copy(panoramas[i].values().begin(), panoramas[i].values().end(), b.x_g.data() + i * c * h * w);
        std::copy(p.image.values().begin(), p.image.values().end(), b.x_l.data() + i * c * h * w);
        std::copy(p.mask.values().begin(), p.mask.values().end(), b.mask.data() + i * h * w);
    }
    return b;
}

ViewSpec random_view(std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> lon(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> fov(ViewSpec::k_min_fov, ViewSpec::k_max_fov);
    const double z = unit(rng);
    const double t = lon(rng);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    ViewSpec v;
    v.center = SphereDirection::from_vector(r * std::cos(t), r * std::sin(t), z);
    v.fov_deg = fov(rng);
    v.aspect = 1.0;
    v.roll = 0.0;
    return v;
}

// ---------------------------------------------------------------- optimizer

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamStore& store)
{
    const auto& entries = store.entries();
    if (m.empty()) {
        for (const auto& [_, p] : entries) {
            m.push_back(Tensor::zeros_like(p.value()));
            v.push_back(Tensor::zeros_like(p.value()));
        }
    }
    require(m.size() == entries.size(), "adam: optimizer state does not match parameter store");
    ++t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (std::size_t k = 0; k < entries.size(); ++k) {
        ag::Var p = entries[k].second;
        const Tensor& g = p.grad();
        if (g.empty()) {
            continue;
        }
        Tensor& val = p.mutable_value();
        double* mk = m[k].data();
        double* vk = v[k].data();
        for (std::size_t i = 0; i < val.numel(); ++i) {
            mk[i] = beta1_ * mk[i] + (1.0 - beta1_) * g[i];
            vk[i] = beta2_ * vk[i] + (1.0 - beta2_) * g[i] * g[i];
            val[i] -= lr_ * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps_);
        }
    }
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(Model& model, TrainConfig cfg)
    : model_(model), cfg_(std::move(cfg)), rng_(cfg_.seed),
      gen_opt_(cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps),
      disc_opt_(cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps)
{
    cfg_.validate();
}

Tensor Trainer::normal_like(const Shape& shape) { return standard_normal(shape, rng_); }

Tensor Trainer::sample_symmetry(std::size_t n)
{
    const ModelConfig& mc = model_.config();
    std::normal_distribution<double> dist(mc.mu_s, mc.sigma_s);
    Tensor out({n, k_num_symmetries});
    for (auto& v : out.values()) {
        v = std::clamp(dist(rng_), 0.0, 1.0);
    }
    return out;
}

void Trainer::restore(std::size_t step, const std::string& rng_state)
{
    step_ = step;
    std::istringstream in(rng_state);
    in >> rng_;
    if (!in) {
        throw DataError("checkpoint: malformed rng state");
    }
}

std::string Trainer::rng_state() const
{
    std::ostringstream out;
    out << rng_;
    return out.str();
}

GeneratorPass generator_pass(const Model& model, const TrainBatch& batch, LossMode mode, const PassNoise& noise)
{
    const ModelConfig& mc = model.config();
    const ObjectiveWeights ow = ObjectiveWeights::from(mc);
    const SymmetryPrior prior{mc.mu_s, mc.sigma_s};
    const std::size_t n = batch.size();
    const bool do_rec = mode != LossMode::gen;
    const bool do_gen = mode != LossMode::rec;

    std::vector<SphereDirection> centers;
    for (const auto& v : batch.views) {
        centers.push_back(v.center);
    }
    const WeightMaps wm = weight_maps(mc, centers);
    const ag::Var x_g = ag::constant(batch.x_g);
    const ag::Var x_l = ag::constant(batch.x_l);
    const ag::Var mask = ag::constant(batch.mask);

    const FeatureBundle fl = model.encoder().forward(x_l);
    const LatentGaussian p = model.prior().forward(fl.f_l);
    const double latent_count = static_cast<double>(p.mu.numel() / n);

    GeneratorPass out;
    ag::Var objective; // per item [N]
    if (do_rec) {
        const FeatureBundle fg = model.encoder().forward(x_g);
        const LatentGaussian q = model.posterior().forward(fg.f_l);
        const ag::Var z = reparameterize(q, noise.eps_q);
        out.s_est = mc.symmetry_control ? model.symmetry_head().estimate(fg.f_l)
                                        : ag::constant(Tensor({n, k_num_symmetries}));
        out.x_hat = model.decoder().forward(fl.f_e, fl.f_l, z, {out.s_est, wm.latent, wm.hidden});
        // D is unchanged by the generator half-step, so D(x_g) is reused there.
        out.d_real = model.discriminator().forward(x_g);
        const ag::Var d_fake = model.discriminator().forward(out.x_hat);
        out.kl = gaussian_kl(q, p);
        if (mc.reduction == Reduction::mean) {
            out.kl = ag::mul_scalar(out.kl, 1.0 / latent_count);
        }
        out.l_rec = ag::add(ag::mul_scalar(out.kl, -1.0),
                            rec_likelihood(x_g, out.x_hat, ag::detach(out.d_real), d_fake, ow));
        if (mc.symmetry_control) {
            out.log_prior_s = symmetry_log_prior(out.s_est, prior);
            out.l_rec = ag::add(out.l_rec, out.log_prior_s);
        }
        objective = do_gen ? ag::mul_scalar(out.l_rec, mc.gamma) : out.l_rec;
    }
    if (do_gen) {
        const ag::Var z_t = reparameterize(p, noise.eps_p);
        out.x_tilde = model.decoder().forward(fl.f_e, fl.f_l, z_t, {ag::constant(noise.s_tilde), wm.latent, wm.hidden});
        const ag::Var d_fake = model.discriminator().forward(out.x_tilde);
        out.l_gen = gen_likelihood(x_l, mask, out.x_tilde, d_fake, ow);
        const ag::Var part = do_rec ? ag::mul_scalar(out.l_gen, 1.0 - mc.gamma) : out.l_gen;
        objective = objective.defined() ? ag::add(objective, part) : part;
    }
    out.objective = ag::mean_all(objective);
    return out;
}

StepMetrics Trainer::train_step(std::span<const Tensor> panoramas)
{
    require(!panoramas.empty(), "train_step: no training images");
    std::uniform_int_distribution<std::size_t> pick(0, panoramas.size() - 1);
    std::vector<Tensor> items;
    std::vector<ViewSpec> views;
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
        items.push_back(panoramas[pick(rng_)]);
        views.push_back(random_view(rng_));
    }
    return train_step(make_batch(items, views));
}

StepMetrics Trainer::train_step(const TrainBatch& batch)
{
    const ModelConfig& mc = model_.config();
    const std::size_t n = batch.size();
    require(n > 0, "train_step: empty batch");
    require(batch.x_g.dim(2) == mc.height && batch.x_g.dim(3) == mc.width(),
            "train_step: batch resolution does not match model");

    ParamStore& gen = model_.generator_params();
    ParamStore& disc = model_.discriminator_params();
    const bool do_rec = cfg_.loss_mode != LossMode::gen;
    const bool do_gen = cfg_.loss_mode != LossMode::rec;

    StepMetrics out;
    out.step = step_ + 1;


    // ---- generator half-step
    gen.zero_grad();
    disc.zero_grad();
    const std::uint64_t disc_hash = cfg_.verify_isolation ? hash_params(disc) : 0;

    const auto [lh, lw] = mc.fl_size();
    const Shape latent{n, mc.latent_channels(), lh, lw};
    PassNoise noise;
    if (do_rec) {
        noise.eps_q = normal_like(latent);
    }
    if (do_gen) {
        noise.eps_p = normal_like(latent);
        noise.s_tilde = sample_symmetry(n);
    }
    const GeneratorPass pass = generator_pass(model_, batch, cfg_.loss_mode, noise);
    if (do_rec) {
        out.l_rec = mean_value(pass.l_rec);
        out.kl_z = mean_value(pass.kl);
        if (pass.log_prior_s.defined()) {
            out.log_prior_s = mean_value(pass.log_prior_s);
        }
        out.rec_l1 = mean_value(ag::abs(ag::sub(ag::constant(batch.x_g), ag::detach(pass.x_hat))));
        out.rec_masked_l1 = masked_l1(batch.x_g, pass.x_hat.value(), batch.mask);
        const Tensor& sv = pass.s_est.value();
        for (std::size_t k = 0; k < k_num_symmetries; ++k) {
            double mean = 0.0, sq = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mean += sv[i * k_num_symmetries + k];
            }
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = sv[i * k_num_symmetries + k] - mean;
                sq += d * d;
            }
            out.s_mean[k] = mean;
            out.s_std[k] = std::sqrt(sq / static_cast<double>(n));
        }
    }
    if (do_gen) {
        out.l_gen = mean_value(pass.l_gen);
        out.gen_masked_l1 = masked_l1(batch.x_l, pass.x_tilde.value(), batch.mask);
    }
    const ag::Var loss = ag::mul_scalar(pass.objective, -1.0);
    out.objective = pass.objective.item();
    check_finite(out.l_rec, "L_rec", out.step);
    check_finite(out.l_gen, "L_gen", out.step);
    check_finite(out.objective, "generator objective", out.step);
    const ag::Var x_hat = pass.x_hat, x_tilde = pass.x_tilde, d_real_graph = pass.d_real;

    ag::backward(loss);
    gen_opt_.step(gen);
    if (cfg_.verify_isolation && hash_params(disc) != disc_hash) {
        throw NumericError("generator update modified discriminator parameters");
    }

    // ---- discriminator half-step
    gen.zero_grad();
    disc.zero_grad();
    const std::uint64_t gen_hash = cfg_.verify_isolation ? hash_params(gen) : 0;
    const ag::Var d_real = d_real_graph.defined() ? d_real_graph : model_.discriminator().forward(ag::constant(batch.x_g));
    std::vector<ag::Var> fakes;
    if (x_hat.defined()) {
        fakes.push_back(ag::detach(x_hat));
    }
    if (x_tilde.defined()) {
        fakes.push_back(ag::detach(x_tilde));
    }
    ag::Var l_d;
    const double share = 1.0 / static_cast<double>(fakes.size());
    for (const auto& f : fakes) {
        const ag::Var term = ag::mul_scalar(discriminator_loss(d_real, model_.discriminator().forward(f)), share);
        l_d = l_d.defined() ? ag::add(l_d, term) : term;
    }
    out.l_d = l_d.item();
    check_finite(out.l_d, "L_D", out.step);
    ag::backward(l_d);
    disc_opt_.step(disc);
    if (cfg_.verify_isolation && hash_params(gen) != gen_hash) {
        throw NumericError("discriminator update modified generator parameters");
    }
    gen.zero_grad();
    disc.zero_grad();
    ++step_;
    return out;
}

// ---------------------------------------------------------------- sampling

namespace {

void check_partial(const ModelConfig& mc, const PartialInput& in)
{
    const Shape want{mc.image_channels, mc.height, mc.width()};
    if (in.image.shape() != want) {
        throw DataError("partial image " + shape_string(in.image.shape()) + " does not match model resolution " +
                        shape_string(want));
    }
    if (in.mask.shape() != Shape{mc.height, mc.width()}) {
        throw DataError("mask " + shape_string(in.mask.shape()) + " does not match model resolution");
    }
}

} // namespace

std::vector<Tensor> generate_batch(const Model& model, std::span<const PartialInput> inputs, const SymmetryParams& s,
                                   std::uint64_t seed)
{
    s.validate();
    const ModelConfig& mc = model.config();
    ag::NoGradGuard ng;
    const std::size_t n = inputs.size();
    if (n == 0) {
        return {};
    }
    std::vector<Tensor> xs;
    std::vector<SphereDirection> centers;
    for (const auto& in : inputs) {
        check_partial(mc, in);
        xs.push_back(in.image.reshaped({1, mc.image_channels, mc.height, mc.width()}));
        centers.push_back(in.center);
    }
    const ag::Var x_l = ag::constant(stack_items(xs));
    const FeatureBundle fl = model.encoder().forward(x_l);
    const LatentGaussian p = model.prior().forward(fl.f_l);
    const std::size_t per = p.mu.numel() / n;
    Tensor eps(p.mu.shape());
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(seed + i);
        const Tensor e = standard_normal({per}, rng);
        std::copy(e.values().begin(), e.values().end(), eps.data() + i * per);
    }
    const ag::Var z = reparameterize(p, eps);
    const WeightMaps wm = weight_maps(mc, centers);
    const ag::Var out =
        model.decoder().forward(fl.f_e, fl.f_l, z, {ag::constant(symmetry_rows(s, n)), wm.latent, wm.hidden});
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img = out.value().item(i);
        images.push_back(img.reshaped({mc.image_channels, mc.height, mc.width()}));
    }
    return images;
}

Tensor generate(const Model& model, const PartialInput& input, const SymmetryParams& s, std::uint64_t seed)
{
    return generate_batch(model, std::span(&input, 1), s, seed).front();
}

Tensor reconstruct(const Model& model, const PartialInput& input, const Tensor& x_g)
{
    const ModelConfig& mc = model.config();
    check_partial(mc, input);
    ag::NoGradGuard ng;
    const Shape s4{1, mc.image_channels, mc.height, mc.width()};
    const FeatureBundle fl = model.encoder().forward(ag::constant(input.image.reshaped(s4)));
    const FeatureBundle fg = model.encoder().forward(ag::constant(x_g.reshaped(s4)));
    const LatentGaussian q = model.posterior().forward(fg.f_l);
    const ag::Var s =
        mc.symmetry_control ? model.symmetry_head().estimate(fg.f_l) : ag::constant(Tensor({1, k_num_symmetries}));
    const WeightMaps wm = weight_maps(mc, std::span(&input.center, 1));
    const ag::Var out = model.decoder().forward(fl.f_e, fl.f_l, q.mu, {s, wm.latent, wm.hidden});
    return out.value().reshaped({mc.image_channels, mc.height, mc.width()});
}

std::vector<std::string> symmetry_preset_names() { return {"90rot", "180rot", "plane0", "plane90", "asym"}; }

SymmetryParams symmetry_preset(const std::string& name)
{
    constexpr double h = 1.0, l = 0.3;
    if (name == "90rot") {
        return {{h, h, h, l, l}};
    }
    if (name == "180rot") {
        return {{l, h, l, l, l}};
    }
    if (name == "plane0") {
        return {{l, l, l, h, l}};
    }
    if (name == "plane90") {
        return {{l, l, l, l, h}};
    }
    if (name == "asym") {
        return {{l, l, l, l, l}};
    }
    throw UsageError("unknown symmetry preset '" + name + "' (expected 90rot, 180rot, plane0, plane90 or asym)");
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char k_magic[4] = {'S', 'G', 'C', 'K'};

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

struct Writer {
    std::vector<char> bytes;
    template <typename T>
    void pod(const T& v)
    {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void raw(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void tensor(const Tensor& t) { raw(t.data(), t.numel() * sizeof(double)); }
};

struct Reader {
    const std::vector<char>& bytes;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const
    {
        if (pos + n > bytes.size()) {
            throw DataError("checkpoint " + path + " is truncated");
        }
    }
    template <typename T>
    T pod()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    void tensor(Tensor& t)
    {
        need(t.numel() * sizeof(double));
        std::memcpy(t.data(), bytes.data() + pos, t.numel() * sizeof(double));
        pos += t.numel() * sizeof(double);
    }
};

json param_index(const ParamStore& store)
{
    json out = json::array();
    for (const auto& [name, v] : store.entries()) {
        out.push_back({{"name", name}, {"shape", v.shape()}});
    }
    return out;
}

void check_index(const json& index, const ParamStore& store, const std::string& path)
{
    const auto& entries = store.entries();
    if (!index.is_array() || index.size() != entries.size()) {
        throw DataError("checkpoint " + path + ": parameter count does not match its config");
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        if (index[k].at("name").get<std::string>() != entries[k].first ||
            index[k].at("shape").get<Shape>() != entries[k].second.shape()) {
            throw DataError("checkpoint " + path + ": parameter " + entries[k].first + " does not match");
        }
    }
}

void write_adam(Writer& w, const Adam& a, const ParamStore& store)
{
    // Optimizer state is materialized as zeros when no step has run yet.
    w.pod<std::uint64_t>(a.t);
    const auto& entries = store.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
        w.tensor(a.m.empty() ? Tensor::zeros_like(entries[k].second.value()) : a.m[k]);
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        w.tensor(a.v.empty() ? Tensor::zeros_like(entries[k].second.value()) : a.v[k]);
    }
}

Adam read_adam(Reader& r, const ParamStore& store, const TrainConfig& cfg)
{
    Adam a(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    a.t = r.pod<std::uint64_t>();
    for (const auto& [_, p] : store.entries()) {
        a.m.push_back(Tensor::zeros_like(p.value()));
        r.tensor(a.m.back());
    }
    for (const auto& [_, p] : store.entries()) {
        a.v.push_back(Tensor::zeros_like(p.value()));
        r.tensor(a.v.back());
    }
    if (a.t == 0) {
        a.m.clear();
        a.v.clear();
    }
    return a;
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model, const Trainer* trainer)
{
    json header{{"format", "spheregen-checkpoint"},
                {"model", to_json(model.config())},
                {"seed", model.seed()},
                {"registry", registry_names()},
                {"generator", param_index(model.generator_params())},
                {"discriminator", param_index(model.discriminator_params())},
                {"has_trainer", trainer != nullptr}};
    if (trainer) {
        header["train"] = to_json(trainer->config());
        header["step"] = trainer->step();
        header["rng"] = trainer->rng_state();
    }
    const std::string h = header.dump();
    Writer w;
    w.raw(k_magic, 4);
    w.pod<std::uint32_t>(k_checkpoint_version);
    w.pod<std::uint64_t>(h.size());
    w.raw(h.data(), h.size());
    for (const auto* store : {&model.generator_params(), &model.discriminator_params()}) {
        for (const auto& [_, v] : store->entries()) {
            w.tensor(v.value());
        }
    }
    if (trainer) {
        write_adam(w, trainer->generator_optimizer(), model.generator_params());
        write_adam(w, trainer->discriminator_optimizer(), model.discriminator_params());
    }
    const std::uint64_t sum = fnv1a(w.bytes.data(), w.bytes.size());
    w.pod(sum);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write checkpoint " + tmp);
        }
        out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
        if (!out) {
            throw DataError("failed writing checkpoint " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw DataError("cannot move checkpoint into place at " + path + ": " + ec.message());
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path);
    }
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + 4 + 8 + 8 || std::memcmp(bytes.data(), k_magic, 4) != 0) {
        throw DataError("checkpoint " + path + " is not a spheregen checkpoint (bad magic or too short)");
    }
    std::uint64_t stored_sum = 0;
    std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
    Reader r{bytes, 4, path};
    const auto version = r.pod<std::uint32_t>();
    if (version != k_checkpoint_version) {
        throw DataError("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                        std::to_string(k_checkpoint_version));
    }
    if (fnv1a(bytes.data(), bytes.size() - 8) != stored_sum) {
        throw DataError("checkpoint " + path + " is corrupt or truncated (checksum mismatch)");
    }
    const auto hlen = r.pod<std::uint64_t>();
    r.need(hlen);
    json header;
    try {
        header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                             bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + hlen));
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path + ": malformed header: " + e.what());
    }
    r.pos += hlen;
    try {
        if (header.at("registry").get<std::vector<std::string>>() != registry_names()) {
            throw DataError("checkpoint " + path + " was written with a different symmetry registry");
        }
        LoadedCheckpoint out;
        ModelConfig mc;
        try {
            mc = model_config_from_json(header.at("model"));
        } catch (const UsageError& e) {
            throw DataError("checkpoint " + path + ": " + e.what());
        }
        out.model = std::make_unique<Model>(mc, header.at("seed").get<std::uint64_t>());
        check_index(header.at("generator"), out.model->generator_params(), path);
        check_index(header.at("discriminator"), out.model->discriminator_params(), path);
        for (auto* store : {&out.model->generator_params(), &out.model->discriminator_params()}) {
            for (const auto& [_, v] : store->entries()) {
                ag::Var p = v;
                r.tensor(p.mutable_value());
            }
        }
        if (header.at("has_trainer").get<bool>()) {
            TrainerSnapshot snap;
            snap.config = train_config_from_json(header.at("train"));
            snap.step = header.at("step").get<std::size_t>();
            snap.rng_state = header.at("rng").get<std::string>();
            snap.generator = read_adam(r, out.model->generator_params(), snap.config);
            snap.discriminator = read_adam(r, out.model->discriminator_params(), snap.config);
            out.trainer = std::move(snap);
        }
        if (r.pos + 8 != bytes.size()) {
            throw DataError("checkpoint " + path + " has trailing bytes");
        }
        return out;
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path + ": malformed header: " + e.what());
    }
}

void restore_trainer(Trainer& trainer, const TrainerSnapshot& snap)
{
    trainer.restore(snap.step, snap.rng_state);
    trainer.generator_optimizer() = snap.generator;
    trainer.discriminator_optimizer() = snap.discriminator;
}

// ---------------------------------------------------------------- loop

json to_json(const StepMetrics& m)
{
    return json{{"step", m.step},
                {"L_rec", m.l_rec},
                {"L_gen", m.l_gen},
                {"L_D", m.l_d},
                {"KL_z", m.kl_z},
                {"log_p_s", m.log_prior_s},
                {"rec_l1", m.rec_l1},
                {"rec_masked_l1", m.rec_masked_l1},
                {"gen_masked_l1", m.gen_masked_l1},
                {"objective", m.objective},
                {"s_mean", m.s_mean},
                {"s_std", m.s_std}};
}

StepMetrics run_training(Trainer& trainer, std::span<const Tensor> panoramas, const TrainLoopOptions& opts)
{
    if (panoramas.empty()) {
        throw DataError("training set is empty");
    }
    std::ofstream metrics;
    if (!opts.metrics_path.empty()) {
        const bool fresh = !std::filesystem::exists(opts.metrics_path) || trainer.step() == 0;
        metrics.open(opts.metrics_path, fresh ? std::ios::trunc : std::ios::app);
        if (!metrics) {
            throw DataError("cannot open metrics log " + opts.metrics_path);
        }
        metrics << json{{"type", "header"},
                        {"loss_mode", to_string(trainer.config().loss_mode)},
                        {"start_step", trainer.step()},
                        {"registry", registry_names()},
                        {"model", to_json(trainer.model().config())},
                        {"train", to_json(trainer.config())}}
                       .dump()
                << '\n';
    }
    const TrainConfig& cfg = trainer.config();
    StepMetrics last;
    while (trainer.step() < cfg.steps) {
        last = trainer.train_step(panoramas);
        if (metrics.is_open()) {
            metrics << to_json(last).dump() << '\n';
            metrics.flush();
        }
        if (opts.on_step) {
            opts.on_step(last);
        }
        if (!opts.checkpoint_path.empty() && cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0) {
            save_checkpoint(opts.checkpoint_path, trainer.model(), &trainer);
        }
    }
    if (!opts.checkpoint_path.empty()) {
        save_checkpoint(opts.checkpoint_path, trainer.model(), &trainer);
    }
    return last;
}

} // namespace spheregen

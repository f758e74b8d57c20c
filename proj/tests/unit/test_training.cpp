#include "support.hpp"

#include "core/errors.hpp"
#include "core/geometry.hpp"
#include "core/training.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

using namespace spheregen;

namespace {

ModelConfig micro()
{
    ModelConfig c = ModelConfig::tiny(16);
    c.encoder_channels = {2, 3, 3};
    c.prior_layers = 2;
    c.discriminator_channels = {2, 3};
    c.validate();
    return c;
}

std::vector<Tensor> panoramas(std::size_t n, std::size_t height, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(test::random_tensor({3, height, 2 * height}, rng, 0, 1));
    }
    return out;
}

TrainBatch random_batch(std::size_t n, std::size_t height, std::mt19937_64& rng)
{
    const auto imgs = panoramas(n, height, rng());
    std::vector<ViewSpec> views;
    for (std::size_t i = 0; i < n; ++i) {
        views.push_back(random_view(rng));
    }
    return make_batch(imgs, views);
}

PassNoise noise_for(const Model& m, std::size_t n, std::mt19937_64& rng)
{
    const auto [h, w] = m.config().fl_size();
    const Shape latent{n, m.config().latent_channels(), h, w};
    return {test::normal_tensor(latent, rng), test::normal_tensor(latent, rng), test::random_tensor({n, 5}, rng, 0, 1)};
}

TrainConfig quick(std::size_t batch, std::uint64_t seed, LossMode mode = LossMode::both)
{
    TrainConfig t;
    t.batch_size = batch;
    t.seed = seed;
    t.loss_mode = mode;
    t.learning_rate = 1e-3;
    return t;
}

std::uint64_t fnv1a(const std::string& bytes)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string slurp(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& path, const std::string& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Rewrites a checkpoint with an edited header and a valid checksum.
void edit_header(const std::string& path, const std::function<void(nlohmann::json&, std::uint32_t&)>& edit)
{
    std::string b = slurp(path);
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    std::memcpy(&version, b.data() + 4, 4);
    std::memcpy(&len, b.data() + 8, 8);
    nlohmann::json h = nlohmann::json::parse(b.substr(16, len));
    edit(h, version);
    const std::string hs = h.dump();
    std::string out = b.substr(0, 4);
    out.append(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t nl = hs.size();
    out.append(reinterpret_cast<const char*>(&nl), 8);
    out += hs;
    out += b.substr(16 + len, b.size() - 16 - len - 8);
    const std::uint64_t sum = fnv1a(out);
    out.append(reinterpret_cast<const char*>(&sum), 8);
    spit(path, out);
}

bool same_metrics(const StepMetrics& a, const StepMetrics& b)
{
    return a.l_rec == b.l_rec && a.l_gen == b.l_gen && a.l_d == b.l_d && a.objective == b.objective &&
           a.s_mean == b.s_mean;
}

} // namespace

TEST_CASE("random views: ranges and uniform centers")
{
    std::mt19937_64 rng(51);
    double sum_z = 0.0, sum_z2 = 0.0, sum_fov = 0.0, sum_x = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const ViewSpec v = random_view(rng);
        CHECK_NOTHROW(v.validate());
        REQUIRE(v.fov_deg >= 30.0);
        REQUIRE(v.fov_deg <= 120.0);
        REQUIRE(v.aspect == 1.0);
        REQUIRE(v.roll == 0.0);
        const auto& c = v.center;
        REQUIRE(std::abs(c.x * c.x + c.y * c.y + c.z * c.z - 1.0) < 1e-12);
        sum_z += c.z;
        sum_z2 += c.z * c.z;
        sum_x += c.x;
        sum_fov += v.fov_deg;
    }
    // Uniform on the sphere: E[z] = 0, E[z^2] = 1/3.
    CHECK(std::abs(sum_z / n) < 0.02);
    CHECK(std::abs(sum_x / n) < 0.02);
    CHECK(std::abs(sum_z2 / n - 1.0 / 3.0) < 0.01);
    CHECK(std::abs(sum_fov / n - 75.0) < 0.6);
}

TEST_CASE("training batches hold the view crop, its mask and gray elsewhere")
{
    std::mt19937_64 rng(52);
    const TrainBatch b = random_batch(3, 16, rng);
    CHECK(b.x_g.shape() == Shape{3, 3, 16, 32});
    CHECK(b.mask.shape() == Shape{3, 1, 16, 32});
    std::size_t inside = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t p = 0; p < 16 * 32; ++p) {
            const double m = b.mask[i * 512 + p];
            REQUIRE((m == 0.0 || m == 1.0));
            inside += m == 1.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = b.x_l[(i * 3 + c) * 512 + p];
                if (m == 0.0) {
                    REQUIRE(v == k_gray_fill);
                }
            }
        }
    }
    CHECK(inside > 0);
    const auto imgs = panoramas(2, 16, 1);
    const std::vector<ViewSpec> one{random_view(rng)};
    CHECK_THROWS(make_batch(imgs, one));
}

TEST_CASE("generator objective assembles the two paths")
{
    const Model m(micro(), 11);
    std::mt19937_64 rng(53);
    const TrainBatch b = random_batch(2, 16, rng);
    const PassNoise noise = noise_for(m, 2, rng);
    const double g = m.config().gamma;
    ag::NoGradGuard ng;

    const GeneratorPass both = generator_pass(m, b, LossMode::both, noise);
    double expect = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        expect += g * both.l_rec.value()[i] + (1 - g) * both.l_gen.value()[i];
    }
    CHECK(both.objective.item() == doctest::Approx(expect / 2).epsilon(1e-12));

    // L_rec = -KL + log p(s_est) + rec likelihood.
    const ObjectiveWeights ow = ObjectiveWeights::from(m.config());
    const ag::Var d_fake = m.discriminator().forward(both.x_hat);
    const Tensor lik = rec_likelihood(ag::constant(b.x_g), both.x_hat, both.d_real, d_fake, ow).value();
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(both.l_rec.value()[i] ==
              doctest::Approx(-both.kl.value()[i] + both.log_prior_s.value()[i] + lik[i]).epsilon(1e-12));
    }
    const FeatureBundle fgx = m.encoder().forward(ag::constant(b.x_g));
    const FeatureBundle flx = m.encoder().forward(ag::constant(b.x_l));
    const double latent = static_cast<double>(fgx.f_l.numel() / 2);
    const Tensor kl = gaussian_kl(m.posterior().forward(fgx.f_l), m.prior().forward(flx.f_l)).value();
    CHECK(both.kl.value()[0] == doctest::Approx(kl[0] / latent).epsilon(1e-12));

    const GeneratorPass rec = generator_pass(m, b, LossMode::rec, noise);
    CHECK_FALSE(rec.l_gen.defined());
    CHECK(rec.objective.item() == doctest::Approx((rec.l_rec.value()[0] + rec.l_rec.value()[1]) / 2).epsilon(1e-12));
    CHECK(max_abs_diff(rec.l_rec.value(), both.l_rec.value()) < 1e-14);

    const GeneratorPass gen = generator_pass(m, b, LossMode::gen, noise);
    CHECK_FALSE(gen.l_rec.defined());
    CHECK(gen.objective.item() == doctest::Approx((gen.l_gen.value()[0] + gen.l_gen.value()[1]) / 2).epsilon(1e-12));
    CHECK(max_abs_diff(gen.l_gen.value(), both.l_gen.value()) < 1e-14);
}

TEST_CASE("generator objective gradient by finite differences")
{
    Model m(micro(), 12);
    std::mt19937_64 rng(54);
    const TrainBatch b = random_batch(2, 16, rng);
    const PassNoise noise = noise_for(m, 2, rng);
    auto f = [&] { return generator_pass(m, b, LossMode::both, noise).objective; };
    const auto& entries = m.generator_params().entries();
    std::uniform_int_distribution<std::size_t> pick(0, entries.size() - 1);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        const std::string& name = entries[pick(rng)].first;
        const test::GradCheck r = test::check_gradient(m.generator_params().find(name), f, rng, 1);
        if (r.max_rel > 1e-4) {
            MESSAGE(name << " rel " << r.max_rel);
        }
        worst = std::max(worst, r.max_rel);
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("training is deterministic for a seed")
{
    const auto imgs = panoramas(4, 16, 2);
    std::vector<StepMetrics> runs[2];
    std::uint64_t hashes[2];
    for (int r = 0; r < 2; ++r) {
        Model m(micro(), 13);
        Trainer t(m, quick(2, 99));
        for (int s = 0; s < 3; ++s) {
            runs[r].push_back(t.train_step(imgs));
        }
        hashes[r] = hash_params(m.generator_params());
    }
    for (int s = 0; s < 3; ++s) {
        CHECK(same_metrics(runs[0][s], runs[1][s]));
    }
    CHECK(hashes[0] == hashes[1]);
    Model m(micro(), 13);
    Trainer t(m, quick(2, 100));
    CHECK_FALSE(same_metrics(t.train_step(imgs), runs[0][0]));
}

TEST_CASE("loss modes and half-step isolation")
{
    const auto imgs = panoramas(4, 16, 3);
    for (LossMode mode : {LossMode::both, LossMode::rec, LossMode::gen}) {
        Model m(micro(), 14);
        Trainer t(m, quick(2, 5, mode));
        const auto g0 = hash_params(m.generator_params());
        const auto d0 = hash_params(m.discriminator_params());
        StepMetrics s;
        CHECK_NOTHROW(s = t.train_step(imgs));
        CHECK(hash_params(m.generator_params()) != g0);
        CHECK(hash_params(m.discriminator_params()) != d0);
        CHECK(std::isfinite(s.l_d));
        CHECK(s.step == 1);
        if (mode == LossMode::rec) {
            CHECK(s.l_gen == 0.0);
            CHECK(s.l_rec != 0.0);
        }
        if (mode == LossMode::gen) {
            CHECK(s.l_rec == 0.0);
            CHECK(s.l_gen != 0.0);
        }
    }
}

TEST_CASE("checkpoint round trip and resume")
{
    test::TempDir dir("ckpt");
    const auto imgs = panoramas(4, 16, 4);
    Model m(micro(), 15);
    Trainer t(m, quick(2, 7));
    t.train_step(imgs);
    t.train_step(imgs);
    const std::string path = dir.file("a.sgck");
    save_checkpoint(path, m, &t);

    LoadedCheckpoint ck = load_checkpoint(path);
    REQUIRE(ck.model);
    REQUIRE(ck.trainer);
    CHECK(hash_params(ck.model->generator_params()) == hash_params(m.generator_params()));
    CHECK(hash_params(ck.model->discriminator_params()) == hash_params(m.discriminator_params()));
    CHECK(ck.trainer->step == 2);
    CHECK(ck.trainer->config.seed == 7);
    CHECK(to_json(ck.model->config()) == to_json(m.config()));

    Trainer resumed(*ck.model, ck.trainer->config);
    restore_trainer(resumed, *ck.trainer);
    CHECK(resumed.step() == 2);
    const StepMetrics a = t.train_step(imgs);
    const StepMetrics b = resumed.train_step(imgs);
    CHECK(a.step == b.step);
    CHECK(same_metrics(a, b));
    CHECK(hash_params(ck.model->generator_params()) == hash_params(m.generator_params()));
    CHECK(hash_params(ck.model->discriminator_params()) == hash_params(m.discriminator_params()));

    // Model-only checkpoint.
    save_checkpoint(dir.file("b.sgck"), m);
    CHECK_FALSE(load_checkpoint(dir.file("b.sgck")).trainer.has_value());
}

TEST_CASE("damaged checkpoints are data errors")
{
    test::TempDir dir("bad");
    const Model m(micro(), 16);
    const std::string path = dir.file("m.sgck");
    save_checkpoint(path, m);
    const std::string good = slurp(path);

    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.sgck")), DataError);
    spit(path, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    spit(path, good.substr(0, 3));
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    std::string flipped = good;
    flipped[flipped.size() / 2] ^= 0x10;
    spit(path, flipped);
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    spit(path, "not a checkpoint at all, just text");
    CHECK_THROWS_AS(load_checkpoint(path), DataError);

    spit(path, good);
    edit_header(path, [](nlohmann::json&, std::uint32_t&) {});
    CHECK_NOTHROW(load_checkpoint(path));
    edit_header(path, [](nlohmann::json& h, std::uint32_t&) {
        auto r = h.at("registry").get<std::vector<std::string>>();
        std::swap(r.front(), r.back());
        h["registry"] = r;
    });
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    spit(path, good);
    edit_header(path, [](nlohmann::json&, std::uint32_t& v) { v += 1; });
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    spit(path, good);
    edit_header(path, [](nlohmann::json& h, std::uint32_t&) { h["model"]["encoder_channels"] = {2, 3, 4}; });
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("generation: presets, seeds and batching")
{
    CHECK(symmetry_preset("90rot").s == std::array<double, 5>{1, 1, 1, 0.3, 0.3});
    CHECK(symmetry_preset("180rot").s == std::array<double, 5>{0.3, 1, 0.3, 0.3, 0.3});
    CHECK(symmetry_preset("plane0").s == std::array<double, 5>{0.3, 0.3, 0.3, 1, 0.3});
    CHECK(symmetry_preset("plane90").s == std::array<double, 5>{0.3, 0.3, 0.3, 0.3, 1});
    CHECK(symmetry_preset("asym").s == std::array<double, 5>{0.3, 0.3, 0.3, 0.3, 0.3});
    CHECK(symmetry_preset_names().size() == 5);
    CHECK_THROWS_AS(symmetry_preset("rot45"), UsageError);

    const Model m(ModelConfig::tiny(), 17);
    const auto imgs = panoramas(3, 32, 5);
    std::mt19937_64 rng(55);
    std::vector<PartialInput> inputs;
    for (const auto& img : imgs) {
        const ViewSpec v = random_view(rng);
        const PartialImage p = nfov_to_equirect(img, v);
        inputs.push_back({p.image, p.mask, v.center});
    }
    const SymmetryParams s = symmetry_preset("180rot");
    const Tensor a = generate(m, inputs[0], s, 3);
    CHECK(a.shape() == Shape{3, 32, 64});
    CHECK(generate(m, inputs[0], s, 3) == a);
    CHECK(max_abs_diff(generate(m, inputs[0], s, 4), a) > 1e-9);
    CHECK(max_abs_diff(generate(m, inputs[0], symmetry_preset("plane0"), 3), a) > 1e-9);
    for (double v : a.values()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    const auto batch = generate_batch(m, inputs, s, 10);
    REQUIRE(batch.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(max_abs_diff(batch[i], generate(m, inputs[i], s, 10 + i)) < 1e-10);
    }
    CHECK_THROWS(generate(m, inputs[0], SymmetryParams{{1.2, 0, 0, 0, 0}}, 0));
    PartialInput wrong = inputs[0];
    wrong.image = Tensor({3, 16, 32});
    CHECK_THROWS(generate(m, wrong, s, 0));
    CHECK(reconstruct(m, inputs[0], imgs[0]).shape() == Shape{3, 32, 64});
}

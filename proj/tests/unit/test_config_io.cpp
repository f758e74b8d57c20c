#include "support.hpp"

#include "core/config.hpp"
#include "core/errors.hpp"
#include "core/image_io.hpp"

#include <fstream>

using namespace spheregen;

TEST_CASE("config keys: dotted, bare and aliases")
{
    RunConfig c;
    c.set("lr", "0.002");
    c.set("train.batch_size", "3");
    c.set("batch", "4");
    c.set("model.kappa", "2.5");
    c.set("gamma", "0.25");
    c.set("loss", "rec");
    c.set("circular_padding", "off");
    c.set("encoder_channels", "8,16,16,16,16");
    c.set("reduction", "sum");
    c.set("seed", "12");
    CHECK(c.train.learning_rate == 0.002);
    CHECK(c.train.batch_size == 4);
    CHECK(c.model.kappa == 2.5);
    CHECK(c.model.gamma == 0.25);
    CHECK(c.train.loss_mode == LossMode::rec);
    CHECK_FALSE(c.model.circular_padding);
    CHECK(c.model.encoder_channels == std::vector<std::size_t>{8, 16, 16, 16, 16});
    CHECK(c.model.reduction == Reduction::sum);
    CHECK(c.train.seed == 12);
    CHECK_NOTHROW(c.validate());

    CHECK_THROWS_AS(c.set("nonsense", "1"), UsageError);
    CHECK_THROWS_AS(c.set("lr", "fast"), UsageError);
    CHECK_THROWS_AS(c.set("batch_size", "-2"), UsageError);
    CHECK_THROWS_AS(c.set("attention", "maybe"), UsageError);
    CHECK_THROWS_AS(c.set("loss_mode", "adv"), UsageError);
    CHECK_THROWS_AS(c.set("reduction", "max"), UsageError);
    CHECK_THROWS_AS(c.set("encoder_channels", ""), UsageError);
    c.set("gamma", "2");
    CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("presets keep training settings")
{
    RunConfig c;
    c.set("steps", "77");
    c.apply_preset("tiny");
    CHECK(c.model.preset == "tiny");
    CHECK(c.model.height == 32);
    CHECK(c.train.steps == 77);
    c.apply_preset("paper");
    CHECK(c.model.height == 256);
    CHECK_THROWS_AS(c.apply_preset("huge"), UsageError);
    CHECK(loss_mode_from_string(to_string(LossMode::gen)) == LossMode::gen);
}

TEST_CASE("config JSON round trip and file loading")
{
    RunConfig c;
    c.apply_preset("tiny");
    c.set("beta", "-10");
    c.set("square_rec_adversarial", "true");
    c.set("checkpoint_every", "5");
    const nlohmann::json j = to_json(c);
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.model.beta == -10.0);
    CHECK(back.model.square_rec_adversarial);
    CHECK(back.train.checkpoint_every == 5);

    test::TempDir dir("cfg");
    std::ofstream(dir.file("c.json")) << R"({"model": {"preset": "tiny", "kappa": 4}, "train": {"steps": 9}})";
    const RunConfig f = load_run_config(dir.file("c.json"));
    CHECK(f.model.height == 32);
    CHECK(f.model.kappa == 4.0);
    CHECK(f.train.steps == 9);
    std::ofstream(dir.file("u.json")) << R"({"model": {"kapa": 4}})";
    CHECK_THROWS_AS(load_run_config(dir.file("u.json")), UsageError);
    std::ofstream(dir.file("t.json")) << R"({"train": {"steps": "many"}})";
    CHECK_THROWS_AS(load_run_config(dir.file("t.json")), UsageError);
    std::ofstream(dir.file("bad.json")) << "{";
    CHECK_THROWS_AS(load_run_config(dir.file("bad.json")), UsageError);
    CHECK_THROWS_AS(load_run_config(dir.file("missing.json")), UsageError);
}

TEST_CASE("PNG round trip quantizes to 8 bits")
{
    test::TempDir dir("png");
    std::mt19937_64 rng(81);
    const Tensor img = test::random_tensor({3, 5, 7}, rng, -0.2, 1.2);
    save_png(dir.file("a.png"), img);
    const Tensor back = load_png_rgb(dir.file("a.png"));
    REQUIRE(back.shape() == img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i) {
        const double clamped = std::clamp(img[i], 0.0, 1.0);
        CHECK(std::abs(back[i] - clamped) <= 0.5 / 255.0 + 1e-12);
        CHECK(back[i] * 255.0 == doctest::Approx(std::round(back[i] * 255.0)));
    }
    save_png(dir.file("b.png"), back);
    CHECK(load_png_rgb(dir.file("b.png")) == back);

    const Tensor gray = test::random_tensor({4, 6}, rng, 0, 1);
    save_png(dir.file("g.png"), gray);
    CHECK(load_png_gray(dir.file("g.png")).shape() == Shape{4, 6});
    const Tensor as_rgb = load_png_rgb(dir.file("g.png"));
    CHECK(as_rgb.shape() == Shape{3, 4, 6});
    CHECK(as_rgb[0] == as_rgb[24]);

    CHECK_THROWS_AS(load_png_rgb(dir.file("none.png")), DataError);
    std::ofstream(dir.file("junk.png")) << "not a png";
    CHECK_THROWS_AS(load_png_rgb(dir.file("junk.png")), DataError);
    CHECK_THROWS(save_png(dir.file("x.png"), Tensor({2, 4, 4})));
}

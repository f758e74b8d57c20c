#include "support.hpp"

#include "core/errors.hpp"
#include "core/image_io.hpp"
#include "core/synthetic.hpp"

#include <filesystem>
#include <fstream>

using namespace spheregen;

TEST_CASE("labels map onto the registry")
{
    const auto& labels = scene_labels();
    REQUIRE(labels.size() == k_num_symmetries + 1);
    for (std::size_t k = 0; k < k_num_symmetries; ++k) {
        CHECK(labels[k] == registry_names()[k]);
        CHECK(label_symmetry(labels[k])->name() == labels[k]);
    }
    CHECK_FALSE(label_symmetry("asym").has_value());
    CHECK_THROWS_AS(label_symmetry("rot45"), UsageError);
}

TEST_CASE("symmetric scenes are exactly invariant, also after PNG quantization")
{
    test::TempDir dir("scene");
    for (const auto& label : scene_labels()) {
        for (std::uint64_t seed = 0; seed < 6; ++seed) {
            const SceneRecipe r = random_recipe(label, seed * 7919 + 1, 32);
            const Tensor img = render_scene(r);
            REQUIRE(img.shape() == Shape{3, 32, 64});
            for (double v : img.values()) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
            save_png(dir.file("s.png"), img);
            const Tensor q = load_png_rgb(dir.file("s.png"));
            const auto t = label_symmetry(label);
            if (t) {
                CHECK(max_abs_diff(symmetry_transform(img, *t), img) == 0.0);
                CHECK(max_abs_diff(symmetry_transform(q, *t), q) == 0.0);
            } else {
                CHECK(min_asymmetry(img) > k_asym_threshold);
                CHECK(min_asymmetry(q) > k_asym_threshold);
            }
        }
    }
}

TEST_CASE("rendering is reproducible and seed dependent")
{
    const SceneRecipe a = random_recipe("plane0", 5, 32);
    CHECK(render_scene(a) == render_scene(a));
    CHECK(max_abs_diff(render_scene(a), render_scene(random_recipe("plane0", 6, 32))) > 0.01);
    const SceneRecipe back = scene_recipe_from_json(to_json(a));
    CHECK(to_json(back) == to_json(a));
    SceneRecipe bad = a;
    bad.horizon = 0.95;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = a;
    bad.height = 31; // width 62 is not a multiple of 4
    CHECK_THROWS_AS(bad.validate(), UsageError);
    CHECK_THROWS_AS(scene_recipe_from_json(nlohmann::json{{"label", 3}}), DataError);
}

TEST_CASE("label counts follow the mix")
{
    std::mt19937_64 rng(61);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 1000)(rng);
        LabelMix mix;
        double total = 0.0;
        for (const auto& l : scene_labels()) {
            if (std::bernoulli_distribution(0.7)(rng)) {
                mix[l] = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
                total += mix[l];
            }
        }
        if (total == 0.0) {
            continue;
        }
        const auto counts = label_counts(n, mix);
        std::size_t sum = 0;
        for (const auto& [l, c] : counts) {
            sum += c;
            CHECK(std::abs(static_cast<double>(c) - static_cast<double>(n) * mix.at(l) / total) < 1.0);
        }
        CHECK(sum == n);
    }
    CHECK(label_counts(600, uniform_mix()).at("rot90") == 100);
    const LabelMix m = parse_mix("rot180=1,asym=2");
    CHECK(m.size() == 2);
    CHECK(m.at("asym") == 2.0);
    CHECK(label_counts(9, m).at("asym") == 6);
    CHECK_THROWS_AS(parse_mix("rot180"), UsageError);
    CHECK_THROWS_AS(parse_mix("rot180=x"), UsageError);
    CHECK_THROWS_AS(parse_mix("rot180=-1"), UsageError);
    CHECK_THROWS_AS(parse_mix("rot180=1,rot180=2"), UsageError);
    CHECK_THROWS_AS(parse_mix("rot180=0"), UsageError);
    CHECK_THROWS_AS(parse_mix("spiral=1"), UsageError);
}

TEST_CASE("split sizes are 50:10:5")
{
    CHECK(split_sizes(65) == std::array<std::size_t, 3>{50, 10, 5});
    CHECK(split_sizes(650) == std::array<std::size_t, 3>{500, 100, 50});
    for (std::size_t n = 1; n < 400; ++n) {
        const auto s = split_sizes(n);
        CHECK(s[0] + s[1] + s[2] == n);
        CHECK(std::abs(static_cast<double>(s[0]) - n * 50.0 / 65.0) <= 0.5);
    }
}

TEST_CASE("corpus directory: manifest, reproducibility and overwrite rules")
{
    test::TempDir a("corpus_a"), b("corpus_b");
    const CorpusSummary sa = build_corpus(a.str(), 24, uniform_mix(), 3, 16);
    const CorpusSummary sb = build_corpus(b.str(), 24, uniform_mix(), 3, 16);
    CHECK(sa.total == 24);
    CHECK(sa.manifest_sha == sb.manifest_sha);
    CHECK(sa.per_label.at("plane90") == 4);
    CHECK(sa.per_split.at("train") + sa.per_split.at("test") + sa.per_split.at("val") == 24);

    const auto items = read_manifest(a.str());
    REQUIRE(items.size() == 24);
    for (const auto& item : items) {
        CHECK(std::filesystem::exists(a.file(item.file)));
        const Tensor img = load_png_rgb(a.file(item.file));
        CHECK(img == load_png_rgb(b.file(item.file)));
        if (const auto t = label_symmetry(item.label)) {
            CHECK(max_abs_diff(symmetry_transform(img, *t), img) == 0.0);
        }
    }
    const LoadedSplit train = load_split(a.str(), "train", 16);
    CHECK(train.images.size() == sa.per_split.at("train"));
    CHECK(load_split(a.str(), "all", 16).images.size() == 24);
    CHECK_THROWS_AS(load_split(a.str(), "train", 32), DataError);
    CHECK_THROWS_AS(load_split(a.str(), "holdout", 16), UsageError);

    CHECK_THROWS_AS(build_corpus(a.str(), 24, uniform_mix(), 4, 16), DataError);
    const CorpusSummary forced = build_corpus(a.str(), 12, uniform_mix(), 4, 16, true);
    CHECK(forced.manifest_sha != sa.manifest_sha);
    CHECK(read_manifest(a.str()).size() == 12);
    CHECK(std::distance(std::filesystem::directory_iterator(a.file("images")), {}) == 12);

    CHECK_THROWS_AS(build_corpus(a.file("x"), 0, uniform_mix(), 4, 16), UsageError);
    std::ofstream(a.file("plain")) << "x";
    CHECK_THROWS_AS(build_corpus(a.file("plain"), 4, uniform_mix(), 4, 16), DataError);
    test::TempDir empty("corpus_empty");
    CHECK_THROWS_AS(read_manifest(empty.str()), DataError);
    std::ofstream(empty.file("manifest.jsonl")) << "{not json\n";
    CHECK_THROWS_AS(read_manifest(empty.str()), DataError);
}

#include "core/synthetic.hpp"

#include "core/errors.hpp"
#include "core/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace spheregen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double k_pi = std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

using Color = std::array<double, 3>;

Color random_color(std::mt19937_64& rng, double lo, double hi)
{
    std::uniform_real_distribution<double> u(lo, hi);
    return {u(rng), u(rng), u(rng)};
}

double wrap_angle(double a)
{
    a = std::fmod(a + k_pi, 2.0 * k_pi);
    if (a < 0.0) {
        a += 2.0 * k_pi;
    }
    return a - k_pi;
}

double smoothstep(double e0, double e1, double x)
{
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

struct Blob {
    double lon, colat, radius, strength;
    Color color;
};

struct Stripe {
    double lon, half_width, top, strength;
    Color color;
};

// Longitude images of a point under the label's symmetry group (radians).
std::vector<std::function<double(double)>> group_actions(const std::optional<SymmetryType>& t)
{
    std::vector<std::function<double(double)>> g{[](double th) { return th; }};
    if (!t) {
        return g;
    }
    if (t->kind == SymmetryKind::rotation) {
        const int order = t->order();
        const double step = 2.0 * k_pi / order;
        for (int k = 1; k < order; ++k) {
            g.push_back([step, k](double th) { return wrap_angle(th + step * k); });
        }
    } else {
        const double a = t->angle_deg * k_pi / 180.0;
        g.push_back([a](double th) { return wrap_angle(2.0 * a - th); });
    }
    return g;
}

// Column orbits under the group generated by the label's transform; every
// column takes the value of its orbit's smallest member.
void enforce_symmetry(Tensor& img, const SymmetryType& t)
{
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const std::vector<std::size_t> map = transform_column_map(w, t);
    std::vector<std::size_t> rep(w);
    for (std::size_t j = 0; j < w; ++j) {
        std::size_t best = j;
        std::size_t k = map[j];
        while (k != j) {
            best = std::min(best, k);
            k = map[k];
        }
        rep[j] = best;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < h; ++i) {
            double* row = img.data() + (ch * h + i) * w;
            for (std::size_t j = 0; j < w; ++j) {
                row[j] = row[rep[j]];
            }
        }
    }
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

Tensor render_once(const SceneRecipe& r, std::uint64_t seed)
{
    const EquirectGrid grid = EquirectGrid::from_height(r.height);
    const auto sym = label_symmetry(r.label);
    const auto actions = group_actions(sym);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const Color sky_top = random_color(rng, 0.05, 0.6);
    const Color sky_low = random_color(rng, 0.4, 0.95);
    const Color ground_far = random_color(rng, 0.2, 0.7);
    const Color ground_near = random_color(rng, 0.0, 0.5);
    const double horizon = r.horizon * k_pi;

    std::vector<Blob> blobs;
    for (std::size_t b = 0; b < r.blobs; ++b) {
        Blob base{wrap_angle(u01(rng) * 2.0 * k_pi), (0.15 + 0.7 * u01(rng)) * k_pi, 0.12 + 0.3 * u01(rng),
                  0.6 + 0.4 * u01(rng), random_color(rng, 0.0, 1.0)};
        for (const auto& act : actions) {
            Blob copy = base;
            copy.lon = act(base.lon);
            blobs.push_back(copy);
        }
    }
    std::vector<Stripe> stripes;
    for (std::size_t s = 0; s < r.stripes; ++s) {
        Stripe base{wrap_angle(u01(rng) * 2.0 * k_pi), 0.04 + 0.12 * u01(rng), horizon * (0.3 + 0.6 * u01(rng)),
                    0.7 + 0.3 * u01(rng), random_color(rng, 0.0, 1.0)};
        for (const auto& act : actions) {
            Stripe copy = base;
            copy.lon = act(base.lon);
            stripes.push_back(copy);
        }
    }

    const std::size_t h = grid.height, w = grid.width;
    Tensor img({3, h, w});
    for (std::size_t i = 0; i < h; ++i) {
        const double phi = grid.colatitude(i);
        Color bg;
        const double ground = smoothstep(horizon - 0.02 * k_pi, horizon + 0.02 * k_pi, phi);
        const double ts = std::clamp(phi / horizon, 0.0, 1.0);
        const double tg = std::clamp((phi - horizon) / (k_pi - horizon), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
            const double sky = sky_top[c] + (sky_low[c] - sky_top[c]) * ts;
            const double gnd = ground_far[c] + (ground_near[c] - ground_far[c]) * tg;
            bg[c] = sky + (gnd - sky) * ground;
        }
        for (std::size_t j = 0; j < w; ++j) {
            const SphereDirection d = pixel_to_direction(i, j, grid);
            const double theta = grid.longitude(j);
            Color px = bg;
            for (const Stripe& s : stripes) {
                const double dl = wrap_angle(theta - s.lon);
                const double vertical = smoothstep(s.top - 0.03, s.top + 0.03, phi) *
                                        (1.0 - smoothstep(horizon + 0.01, horizon + 0.06, phi));
                const double a = s.strength * std::exp(-0.5 * dl * dl / (s.half_width * s.half_width)) * vertical;
                for (int c = 0; c < 3; ++c) {
                    px[c] += (s.color[c] - px[c]) * a;
                }
            }
            for (const Blob& b : blobs) {
                const SphereDirection bc{std::sin(b.colat) * std::cos(b.lon), std::sin(b.colat) * std::sin(b.lon),
                                         std::cos(b.colat)};
                const double ang = std::acos(std::clamp(d.dot(bc), -1.0, 1.0));
                const double a = b.strength * std::exp(-0.5 * ang * ang / (b.radius * b.radius));
                for (int c = 0; c < 3; ++c) {
                    px[c] += (b.color[c] - px[c]) * a;
                }
            }
            for (int c = 0; c < 3; ++c) {
                img[(static_cast<std::size_t>(c) * h + i) * w + j] = std::clamp(px[c], 0.0, 1.0);
            }
        }
    }
    if (sym) {
        enforce_symmetry(img, *sym);
    }
    return img;
}

} // namespace

const std::vector<std::string>& scene_labels()
{
    static const std::vector<std::string> labels = [] {
        std::vector<std::string> out = registry_names();
        out.push_back("asym");
        return out;
    }();
    return labels;
}

std::optional<SymmetryType> label_symmetry(const std::string& label)
{
    if (label == "asym") {
        return std::nullopt;
    }
    try {
        return symmetry_by_name(label);
    } catch (const DomainError&) {
        throw UsageError("unknown scene label '" + label + "'");
    }
}

void SceneRecipe::validate() const
{
    label_symmetry(label);
    if (!(horizon > 0.1 && horizon < 0.9)) {
        throw UsageError("scene horizon must lie in (0.1, 0.9)");
    }
    const EquirectGrid g = EquirectGrid::from_height(height);
    g.validate();
    if (!registry_compatible(g.width)) {
        throw UsageError("scene width " + std::to_string(g.width) + " does not admit exact symmetry transforms");
    }
}

json to_json(const SceneRecipe& r)
{
    return json{{"label", r.label},     {"seed", r.seed},       {"blobs", r.blobs},
                {"stripes", r.stripes}, {"horizon", r.horizon}, {"height", r.height}};
}

SceneRecipe scene_recipe_from_json(const json& j)
{
    SceneRecipe r;
    try {
        r.label = j.at("label").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.blobs = j.at("blobs").get<std::size_t>();
        r.stripes = j.at("stripes").get<std::size_t>();
        r.horizon = j.at("horizon").get<double>();
        r.height = j.at("height").get<std::size_t>();
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed scene recipe: ") + e.what());
    }
    return r;
}

SceneRecipe random_recipe(const std::string& label, std::uint64_t seed, std::size_t height)
{
    std::mt19937_64 rng(splitmix64(seed));
    const auto sym = label_symmetry(label);
    const std::size_t order = sym ? static_cast<std::size_t>(sym->order()) : 1;
    const std::size_t max_blobs = order >= 4 ? 2 : 4;
    const std::size_t max_stripes = order >= 4 ? 2 : 3;
    SceneRecipe r;
    r.label = label;
    r.seed = seed;
    r.blobs = std::uniform_int_distribution<std::size_t>(1, max_blobs)(rng);
    r.stripes = std::uniform_int_distribution<std::size_t>(1, max_stripes)(rng);
    r.horizon = std::uniform_real_distribution<double>(0.5, 0.7)(rng);
    r.height = height;
    return r;
}

Tensor render_scene(const SceneRecipe& r)
{
    r.validate();
    if (r.label != "asym") {
        return render_once(r, r.seed);
    }
    // Resample until no registry transform maps the scene close to itself.
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        Tensor img = render_once(r, attempt == 0 ? r.seed : splitmix64(r.seed + attempt));
        if (min_asymmetry(img) > k_asym_threshold) {
            return img;
        }
    }
    throw DataError("could not render an asymmetric scene for seed " + std::to_string(r.seed));
}

double min_asymmetry(const Tensor& img)
{
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : symmetry_registry()) {
        const Tensor ti = symmetry_transform(img, t);
        double sum = 0.0;
        for (std::size_t i = 0; i < img.numel(); ++i) {
            sum += std::abs(ti[i] - img[i]);
        }
        best = std::min(best, sum / static_cast<double>(img.numel()));
    }
    return best;
}

LabelMix uniform_mix()
{
    LabelMix m;
    for (const auto& l : scene_labels()) {
        m[l] = 1.0;
    }
    return m;
}

LabelMix parse_mix(const std::string& text)
{
    if (text.empty() || text == "uniform") {
        return uniform_mix();
    }
    LabelMix m;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) {
            throw UsageError("mix entry '" + part + "' must look like label=weight");
        }
        const std::string label = part.substr(0, eq);
        label_symmetry(label);
        double w = 0.0;
        try {
            std::size_t used = 0;
            w = std::stod(part.substr(eq + 1), &used);
            if (used != part.size() - eq - 1) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            throw UsageError("mix weight for '" + label + "' is not a number");
        }
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw UsageError("mix weight for '" + label + "' must be finite and >= 0");
        }
        if (m.count(label)) {
            throw UsageError("mix label '" + label + "' given twice");
        }
        m[label] = w;
    }
    double total = 0.0;
    for (const auto& [_, w] : m) {
        total += w;
    }
    if (!(total > 0.0)) {
        throw UsageError("mix weights must not all be zero");
    }
    return m;
}

std::map<std::string, std::size_t> label_counts(std::size_t n, const LabelMix& mix)
{
    double total = 0.0;
    for (const auto& [label, w] : mix) {
        label_symmetry(label);
        if (!(w >= 0.0)) {
            throw UsageError("negative mix weight for " + label);
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw UsageError("mix weights must not all be zero");
    }
    std::map<std::string, std::size_t> counts;
    std::vector<std::pair<double, std::string>> remainders;
    std::size_t assigned = 0;
    for (const auto& [label, w] : mix) {
        const double exact = static_cast<double>(n) * w / total;
        const auto base = static_cast<std::size_t>(std::floor(exact));
        counts[label] = base;
        assigned += base;
        remainders.emplace_back(exact - static_cast<double>(base), label);
    }
    // Largest remainder first; ties broken by label order for determinism.
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) {
        ++counts[remainders[k % remainders.size()].second];
    }
    return counts;
}

std::array<std::size_t, 3> split_sizes(std::size_t n)
{
    const auto train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 50.0 / 65.0));
    const auto test = std::min(n - train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * 10.0 / 65.0)));
    return {train, test, n - train - test};
}

CorpusSummary build_corpus(const std::string& dir, std::size_t n, const LabelMix& mix, std::uint64_t seed,
                           std::size_t height, bool force)
{
    if (n == 0) {
        throw UsageError("corpus size must be positive");
    }
    const auto counts = label_counts(n, mix);
    SceneRecipe probe;
    probe.height = height;
    probe.validate();

    const fs::path root(dir);
    if (fs::exists(root)) {
        if (!fs::is_directory(root)) {
            throw DataError("corpus path " + dir + " exists and is not a directory");
        }
        if (!fs::is_empty(root)) {
            if (!force) {
                throw DataError("corpus directory " + dir + " is not empty (use --force to overwrite)");
            }
            fs::remove_all(root / "images");
            fs::remove(root / "manifest.jsonl");
        }
    }
    fs::create_directories(root / "images");

    std::vector<std::string> labels;
    for (const auto& [label, c] : counts) {
        labels.insert(labels.end(), c, label);
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = labels.size(); i > 1; --i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
        std::swap(labels[i - 1], labels[j]);
    }
    const auto sizes = split_sizes(n);

    CorpusSummary summary;
    summary.total = n;
    std::ostringstream manifest;
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "%06zu", i);
        CorpusItem item;
        item.id = id;
        item.file = "images/" + item.id + ".png";
        item.label = labels[i];
        item.split = i < sizes[0] ? "train" : (i < sizes[0] + sizes[1] ? "test" : "val");
        item.recipe = random_recipe(item.label, splitmix64(seed ^ (0x5851f42d4c957f2dULL * (i + 1))), height);
        save_png((root / item.file).string(), render_scene(item.recipe));
        manifest << json{{"id", item.id},
                         {"file", item.file},
                         {"label", item.label},
                         {"split", item.split},
                         {"recipe", to_json(item.recipe)}}
                        .dump()
                 << '\n';
        ++summary.per_label[item.label];
        ++summary.per_split[item.split];
    }
    const std::string text = manifest.str();
    std::ofstream out(root / "manifest.jsonl", std::ios::binary);
    out << text;
    if (!out) {
        throw DataError("cannot write manifest in " + dir);
    }
    summary.manifest_sha = hex64(fnv1a(text));
    return summary;
}

std::vector<CorpusItem> read_manifest(const std::string& dir)
{
    const fs::path path = fs::path(dir) / "manifest.jsonl";
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open manifest " + path.string());
    }
    std::vector<CorpusItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            CorpusItem it;
            it.id = j.at("id").get<std::string>();
            it.file = j.at("file").get<std::string>();
            it.label = j.at("label").get<std::string>();
            it.split = j.at("split").get<std::string>();
            it.recipe = scene_recipe_from_json(j.at("recipe"));
            items.push_back(std::move(it));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (items.empty()) {
        throw DataError("manifest " + path.string() + " is empty");
    }
    return items;
}

LoadedSplit load_split(const std::string& dir, const std::string& split, std::size_t expected_height)
{
    if (split != "train" && split != "test" && split != "val" && split != "all") {
        throw UsageError("unknown split '" + split + "'");
    }
    LoadedSplit out;
    for (auto& item : read_manifest(dir)) {
        if (split != "all" && item.split != split) {
            continue;
        }
        Tensor img = load_png_rgb((fs::path(dir) / item.file).string());
        if (img.dim(2) != 2 * img.dim(1)) {
            throw DataError(item.file + ": panorama must have width = 2 * height, got " + shape_string(img.shape()));
        }
        if (expected_height != 0 && img.dim(1) != expected_height) {
            throw DataError(item.file + ": height " + std::to_string(img.dim(1)) + " does not match model height " +
                            std::to_string(expected_height));
        }
        out.images.push_back(std::move(img));
        out.items.push_back(std::move(item));
    }
    if (out.images.empty()) {
        throw DataError("split '" + split + "' of " + dir + " is empty");
    }
    return out;
}

} // namespace spheregen

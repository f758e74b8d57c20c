#include "core/evaluation.hpp"

#include "core/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace spheregen {

using nlohmann::json;

// ---------------------------------------------------------------- extractor

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::vector<std::size_t> channels)
    : seed_(seed), channels_(std::move(channels))
{
    if (channels_.empty()) {
        throw UsageError("feature extractor needs at least one layer");
    }
    std::mt19937_64 rng(seed);
    std::size_t in = 3;
    for (std::size_t c : channels_) {
        const double stddev = std::sqrt(2.0 / (1.0 + 0.2 * 0.2) / static_cast<double>(in * 9));
        std::normal_distribution<double> dist(0.0, stddev);
        Tensor w({c, in, 3, 3});
        for (auto& v : w.values()) {
            v = dist(rng);
        }
        // Left-right mirror-symmetric kernels: the map commutes with flips.
        for (std::size_t r = 0; r < c * in * 3; ++r) {
            const double m = 0.5 * (w[r * 3] + w[r * 3 + 2]);
            w[r * 3] = m;
            w[r * 3 + 2] = m;
        }
        weights_.push_back(std::move(w));
        biases_.push_back(Tensor({c}, 0.0));
        in = c;
    }
}

FeatureExtractor FeatureExtractor::load(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open feature extractor " + path);
    }
    try {
        const json j = json::parse(in);
        FeatureExtractor fe(j.at("seed").get<std::uint64_t>(), j.at("channels").get<std::vector<std::size_t>>());
        const auto& layers = j.at("layers");
        if (layers.size() != fe.weights_.size()) {
            throw DataError("feature extractor " + path + ": layer count mismatch");
        }
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto w = layers[k].at("weight").get<std::vector<double>>();
            const auto b = layers[k].at("bias").get<std::vector<double>>();
            if (w.size() != fe.weights_[k].numel() || b.size() != fe.biases_[k].numel()) {
                throw DataError("feature extractor " + path + ": layer " + std::to_string(k) + " has wrong size");
            }
            fe.weights_[k] = Tensor(fe.weights_[k].shape(), w);
            fe.biases_[k] = Tensor(fe.biases_[k].shape(), b);
        }
        return fe;
    } catch (const json::exception& e) {
        throw DataError("feature extractor " + path + ": " + e.what());
    }
}

void FeatureExtractor::save(const std::string& path) const
{
    json layers = json::array();
    for (std::size_t k = 0; k < weights_.size(); ++k) {
        layers.push_back({{"weight", std::vector<double>(weights_[k].values().begin(), weights_[k].values().end())},
                          {"bias", std::vector<double>(biases_[k].values().begin(), biases_[k].values().end())}});
    }
    std::ofstream out(path);
    out << json{{"seed", seed_}, {"channels", channels_}, {"layers", layers}}.dump();
    if (!out) {
        throw DataError("cannot write feature extractor " + path);
    }
}

Tensor FeatureExtractor::raw_features(const Tensor& image) const
{
    if (image.rank() != 3 || image.dim(0) != 3) {
        domain_fail("feature extractor expects [3 x H x W], got " + shape_string(image.shape()));
    }
    const std::size_t scale = std::size_t{1} << weights_.size();
    if (image.dim(1) % scale != 0 || image.dim(2) % scale != 0 || !registry_compatible(image.dim(2) / scale)) {
        domain_fail("feature extractor: image " + shape_string(image.shape()) + " is not divisible into " +
                    std::to_string(weights_.size()) + " pooling levels with an exact symmetry registry");
    }
    ag::NoGradGuard ng;
    ag::Var h = ag::constant(image.reshaped({1, 3, image.dim(1), image.dim(2)}));
    for (std::size_t k = 0; k < weights_.size(); ++k) {
        h = ag::conv2d(h, ag::constant(weights_[k]), ag::constant(biases_[k]), 1, ag::PadMode::circular);
        if (k + 1 < weights_.size()) {
            h = ag::leaky_relu(h, 0.2);
        }
        h = ag::avg_pool2x2(h);
    }
    const Shape& s = h.shape();
    return h.value().reshaped({s[1], s[2], s[3]});
}

Tensor FeatureExtractor::features(const Tensor& image) const
{
    Tensor f = raw_features(image);
    const std::size_t c = f.dim(0), p = f.dim(1) * f.dim(2);
    for (std::size_t k = 0; k < c; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            mean += f[k * p + i];
        }
        mean /= static_cast<double>(p);
        for (std::size_t i = 0; i < p; ++i) {
            f[k * p + i] -= mean;
        }
    }
    return f;
}

std::vector<double> FeatureExtractor::pooled(const Tensor& image) const
{
    const Tensor f = raw_features(image);
    const std::size_t c = f.dim(0), p = f.dim(1) * f.dim(2);
    std::vector<double> out(2 * c);
    for (std::size_t k = 0; k < c; ++k) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            mean += f[k * p + i];
        }
        mean /= static_cast<double>(p);
        for (std::size_t i = 0; i < p; ++i) {
            sq += (f[k * p + i] - mean) * (f[k * p + i] - mean);
        }
        out[k] = mean;
        out[c + k] = std::sqrt(sq / static_cast<double>(p));
    }
    return out;
}

// ---------------------------------------------------------------- SEM

double sem_features(const Tensor& features, const SymmetryType& t)
{
    if (features.rank() < 1 || !registry_compatible(features.shape().back())) {
        domain_fail("SEM: feature width " + std::to_string(features.rank() ? features.shape().back() : 0) +
                    " does not admit exact symmetry transforms");
    }
    const Tensor tf = symmetry_transform(features, t);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < features.numel(); ++i) {
        dot += features[i] * tf[i];
        na += features[i] * features[i];
        nb += tf[i] * tf[i];
    }
    if (na == 0.0 || nb == 0.0) {
        return 1.0; // a constant map is invariant under every transform
    }
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double sem(const Tensor& image, const SymmetryType& t, const FeatureExtractor& fe)
{
    return sem_features(fe.features(image), t);
}

double sem_rotations(const Tensor& image, const FeatureExtractor& fe)
{
    const Tensor f = fe.features(image);
    double s = 0.0;
    for (const char* name : {"rot90", "rot180", "rot270"}) {
        s += sem_features(f, symmetry_by_name(name));
    }
    return s / 3.0;
}

std::vector<std::string> sweep_targets() { return {"rot90", "rot180", "plane0", "plane90"}; }

double sem_target(const Tensor& image, const std::string& target, const FeatureExtractor& fe)
{
    if (target == "rot90") {
        return sem_rotations(image, fe);
    }
    return sem(image, symmetry_by_name(target), fe);
}

SymmetryParams sweep_params(const std::string& target, double level, double other)
{
    SymmetryParams p;
    p.s.fill(other);
    const auto& reg = symmetry_registry();
    auto set = [&](const std::string& name) {
        for (std::size_t i = 0; i < reg.size(); ++i) {
            if (reg[i].name() == name) {
                p.s[i] = level;
                return;
            }
        }
        throw UsageError("unknown sweep target '" + name + "'");
    };
    if (target == "rot90") {
        set("rot90");
        set("rot180");
        set("rot270");
    } else {
        set(target);
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------- FID

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b)
{
    if (a.empty() || b.empty()) {
        domain_fail("frechet_distance: empty sample set");
    }
    const std::size_t d = a.front().size();
    auto to_matrix = [d](const std::vector<std::vector<double>>& rows) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != d) {
                domain_fail("frechet_distance: feature vectors differ in length");
            }
            for (std::size_t k = 0; k < d; ++k) {
                if (!std::isfinite(rows[i][k])) {
                    throw NumericError("frechet_distance: non-finite feature value");
                }
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
            }
        }
        return m;
    };
    const Eigen::MatrixXd ma = to_matrix(a);
    const Eigen::MatrixXd mb = to_matrix(b);
    auto moments = [d](const Eigen::MatrixXd& m, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        mu = m.colwise().mean().transpose();
        const Eigen::MatrixXd c = m.rowwise() - mu.transpose();
        const double denom = m.rows() > 1 ? static_cast<double>(m.rows() - 1) : 1.0;
        cov = (c.transpose() * c) / denom;
        cov += k_fid_regularization * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    moments(ma, mu_a, cov_a);
    moments(mb, mu_b, cov_b);

    // Tr (Sa Sb)^(1/2) = Tr (Sa^(1/2) Sb Sa^(1/2))^(1/2), all symmetric.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
    const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    const Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fid = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(fid)) {
        throw NumericError("frechet_distance: non-finite result");
    }
    return std::max(fid, 0.0);
}

// ---------------------------------------------------------------- seam

double seam_discontinuity(const Tensor& image)
{
    if (image.rank() != 3 || image.dim(2) < 3) {
        domain_fail("seam_discontinuity expects [C x H x W] with W >= 3, got " + shape_string(image.shape()));
    }
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    double seam = 0.0, interior = 0.0;
    for (std::size_t r = 0; r < c * h; ++r) {
        const double* row = image.data() + r * w;
        seam += std::abs(row[0] - row[w - 1]);
        for (std::size_t j = 0; j + 1 < w; ++j) {
            interior += std::abs(row[j + 1] - row[j]);
        }
    }
    seam /= static_cast<double>(c * h);
    interior /= static_cast<double>(c * h * (w - 1));
    if (seam == 0.0) {
        return 0.0;
    }
    return seam / std::max(interior, 1e-12);
}

Quartiles quartiles(std::vector<double> v)
{
    Quartiles q;
    if (v.empty()) {
        return q;
    }
    std::sort(v.begin(), v.end());
    // Linear interpolation between order statistics.
    auto at = [&](double p) {
        const double pos = p * static_cast<double>(v.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
    };
    q.q1 = at(0.25);
    q.median = at(0.5);
    q.q3 = at(0.75);
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    q.mean = s / static_cast<double>(v.size());
    return q;
}

// ---------------------------------------------------------------- harness

std::vector<EvalSample> make_eval_samples(std::span<const Tensor> panoramas, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<EvalSample> out;
    for (const Tensor& p : panoramas) {
        const ViewSpec view = random_view(rng);
        PartialImage part = nfov_to_equirect(p, view);
        out.push_back({p, {std::move(part.image), std::move(part.mask), view.center}});
    }
    return out;
}

Generator model_generator(const Model& model, std::size_t chunk)
{
    return [&model, chunk](const std::vector<EvalSample>& samples, const SymmetryParams& s, std::uint64_t seed) {
        std::vector<Tensor> out;
        for (std::size_t start = 0; start < samples.size(); start += chunk) {
            std::vector<PartialInput> inputs;
            for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) {
                inputs.push_back(samples[i].partial);
            }
            for (auto& img : generate_batch(model, inputs, s, seed + start)) {
                out.push_back(std::move(img));
            }
        }
        return out;
    };
}

Generator echo_generator()
{
    return [](const std::vector<EvalSample>& samples, const SymmetryParams& s, std::uint64_t) {
        s.validate();
        std::vector<Tensor> out;
        for (const auto& smp : samples) {
            out.push_back(smp.ground_truth);
        }
        return out;
    };
}

const SweepCell& SweepReport::cell(const std::string& target, double level) const
{
    for (const auto& c : cells) {
        if (c.target == target && std::abs(c.level - level) < 1e-12) {
            return c;
        }
    }
    throw DomainError("sweep report has no cell " + target + " @ " + std::to_string(level));
}

SweepReport symmetry_sweep(const Generator& gen, const std::vector<EvalSample>& samples,
                           const std::vector<std::string>& targets, const std::vector<double>& levels,
                           const FeatureExtractor& fe, std::uint64_t seed)
{
    if (samples.empty()) {
        throw DataError("symmetry sweep needs at least one held-out sample");
    }
    SweepReport r;
    r.levels = levels;
    for (const auto& target : targets) {
        for (double level : levels) {
            SweepCell cell;
            cell.target = target;
            cell.level = level;
            // Same seed for every cell so only s differs between them.
            for (const Tensor& img : gen(samples, sweep_params(target, level), seed)) {
                cell.sems.push_back(sem_target(img, target, fe));
            }
            cell.stats = quartiles(cell.sems);
            r.cells.push_back(std::move(cell));
        }
    }
    return r;
}

QualityReport quality_report(const Generator& gen, const std::vector<EvalSample>& samples, const SymmetryParams& s,
                             const FeatureExtractor& fe, std::uint64_t seed)
{
    if (samples.empty()) {
        throw DataError("quality report needs at least one held-out sample");
    }
    QualityReport q;
    q.samples = samples.size();
    std::vector<std::vector<double>> real, fake;
    std::vector<double> seams, seams_ref;
    const std::vector<Tensor> images = gen(samples, s, seed);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        real.push_back(fe.pooled(samples[i].ground_truth));
        fake.push_back(fe.pooled(images[i]));
        seams.push_back(seam_discontinuity(images[i]));
        seams_ref.push_back(seam_discontinuity(samples[i].ground_truth));
    }
    q.fid = frechet_distance(fake, real);
    q.seam = quartiles(seams);
    q.seam_reference = quartiles(seams_ref);
    return q;
}

namespace {

json to_json(const Quartiles& q)
{
    return json{{"q1", q.q1}, {"median", q.median}, {"q3", q.q3}, {"mean", q.mean}};
}

} // namespace

json to_json(const SweepReport& r)
{
    json cells = json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"target", c.target}, {"level", c.level}, {"sem", to_json(c.stats)}, {"n", c.sems.size()}});
    }
    return json{{"levels", r.levels}, {"cells", cells}, {"untrained", r.untrained}};
}

json to_json(const QualityReport& r)
{
    return json{{"fid", r.fid},
                {"seam", to_json(r.seam)},
                {"seam_reference", to_json(r.seam_reference)},
                {"samples", r.samples}};
}

std::string sweep_csv(const SweepReport& r)
{
    std::ostringstream out;
    out.precision(6);
    out << "target,level,n,q1,median,q3,mean\n";
    for (const auto& c : r.cells) {
        out << c.target << ',' << c.level << ',' << c.sems.size() << ',' << c.stats.q1 << ',' << c.stats.median << ','
            << c.stats.q3 << ',' << c.stats.mean << '\n';
    }
    return out.str();
}

Tensor montage(const std::vector<Tensor>& images, std::size_t cols)
{
    if (images.empty() || cols == 0) {
        domain_fail("montage: nothing to lay out");
    }
    const Shape& s = images.front().shape();
    require(s.size() == 3, "montage: images must be [C x H x W]");
    const std::size_t c = s[0], h = s[1], w = s[2];
    const std::size_t rows = (images.size() + cols - 1) / cols;
    Tensor out({c, rows * h, cols * w}, 1.0);
    for (std::size_t k = 0; k < images.size(); ++k) {
        require(images[k].shape() == s, "montage: images differ in shape");
        const std::size_t r0 = (k / cols) * h, c0 = (k % cols) * w;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < h; ++i) {
                std::copy_n(images[k].data() + (ch * h + i) * w, w,
                            out.data() + (ch * rows * h + r0 + i) * cols * w + c0);
            }
        }
    }
    return out;
}

} // namespace spheregen

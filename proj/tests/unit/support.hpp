#pragma once

// Generators and numeric helpers shared by the unit tests.

#include "core/autograd.hpp"
#include "core/tensor.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace test {

using spheregen::Shape;
using spheregen::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(shape);
    for (auto& v : t.values()) {
        v = u(rng);
    }
    return t;
}

inline Tensor normal_tensor(const Shape& shape, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> n(0.0, sd);
    Tensor t(shape);
    for (auto& v : t.values()) {
        v = n(rng);
    }
    return t;
}

// Uniform in [lo, hi] with magnitude bounded away from zero (keeps |x| and
// friends off their kinks).
inline Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng, double lo = 0.2, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    std::bernoulli_distribution sign(0.5);
    Tensor t(shape);
    for (auto& v : t.values()) {
        v = sign(rng) ? u(rng) : -u(rng);
    }
    return t;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

// Central differences of a scalar function of the leaf's value, compared
// with the autograd gradient at `count` random coordinates (all if 0).
struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
};

inline GradCheck check_gradient(spheregen::ag::Var leaf, const std::function<spheregen::ag::Var()>& loss,
                                std::mt19937_64& rng, std::size_t count = 0, double h = 1e-5)
{
    leaf.zero_grad();
    spheregen::ag::backward(loss());
    // Leaves the loss does not reach have no gradient buffer.
    const Tensor analytic = leaf.grad().empty() ? Tensor(leaf.shape(), 0.0) : leaf.grad();
    REQUIRE(analytic.numel() == leaf.numel());
    std::vector<std::size_t> idx(leaf.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    if (count > 0 && count < idx.size()) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(count);
    }
    GradCheck r;
    for (std::size_t i : idx) {
        double& x = leaf.mutable_value()[i];
        const double x0 = x;
        double fp = 0.0, fm = 0.0;
        {
            spheregen::ag::NoGradGuard ng;
            x = x0 + h;
            fp = loss().item();
            x = x0 - h;
            fm = loss().item();
        }
        x = x0;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        // Absolute floor for coordinates whose gradient is essentially zero.
        const double err = std::abs(a - numeric) / std::max({1e-6, std::abs(a), std::abs(numeric)});
        r.max_rel = std::max(r.max_rel, err);
        ++r.checked;
    }
    return r;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("spheregen_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

} // namespace test

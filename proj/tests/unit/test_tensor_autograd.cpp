#include "support.hpp"

#include "core/errors.hpp"

using namespace spheregen;
using test::check_gradient;

namespace {

// Direct six-loop convolution with the same boundary rules.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, ag::PadMode pad)
{
    const std::size_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), k = w.dim(2), p = (k - 1) / 2;
    const std::size_t oh = (h + 2 * p - k) / stride + 1, ow = (wd + 2 * p - k) / stride + 1;
    Tensor out({n_, cout, oh, ow});
    for (std::size_t n = 0; n < n_; ++n) {
        for (std::size_t o = 0; o < cout; ++o) {
            for (std::size_t i = 0; i < oh; ++i) {
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < cin; ++c) {
                        for (std::size_t ki = 0; ki < k; ++ki) {
                            for (std::size_t kj = 0; kj < k; ++kj) {
                                const long yi = static_cast<long>(i * stride + ki) - static_cast<long>(p);
                                long yj = static_cast<long>(j * stride + kj) - static_cast<long>(p);
                                if (yi < 0 || yi >= static_cast<long>(h)) {
                                    continue;
                                }
                                if (yj < 0 || yj >= static_cast<long>(wd)) {
                                    if (pad == ag::PadMode::zero) {
                                        continue;
                                    }
                                    yj = (yj + static_cast<long>(wd)) % static_cast<long>(wd);
                                }
                                acc += w[((o * cin + c) * k + ki) * k + kj] *
                                       x.at(n, c, static_cast<std::size_t>(yi), static_cast<std::size_t>(yj));
                            }
                        }
                    }
                    out.at(n, o, i, j) = acc;
                }
            }
        }
    }
    return out;
}

} // namespace

TEST_CASE("tensor basics")
{
    Tensor t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(t.dim(2), DomainError);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DomainError);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));

    std::mt19937_64 rng(1);
    const Tensor a = test::random_tensor({3, 2, 2, 2}, rng);
    const Tensor one = a.item(1);
    CHECK(one.shape() == Shape{1, 2, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(one[i] == a[8 + i]);
    }
    Tensor s = stack_items(std::vector<Tensor>{a.item(2), a.item(0)});
    CHECK(s.item(0) == a.item(2));
    CHECK(s.item(1) == a.item(0));
}

TEST_CASE("conv2d matches a naive convolution")
{
    std::mt19937_64 rng(7);
    for (auto pad : {ag::PadMode::circular, ag::PadMode::zero}) {
        for (std::size_t stride : {1, 2}) {
            for (std::size_t k : {1, 3}) {
                const Tensor x = test::random_tensor({2, 3, 6, 12}, rng);
                const Tensor w = test::random_tensor({4, 3, k, k}, rng);
                const Tensor b = test::random_tensor({4}, rng);
                const Tensor got =
                    ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), stride, pad).value();
                const Tensor want = naive_conv(x, w, b, stride, pad);
                REQUIRE(got.shape() == want.shape());
                CHECK(max_abs_diff(got, want) < 1e-12);
            }
        }
    }
}

TEST_CASE("elementwise op gradients match finite differences")
{
    std::mt19937_64 rng(11);
    const Shape sh{2, 3, 2, 4};
    ag::Var x(test::away_from_zero(sh, rng), true);
    ag::Var y(test::away_from_zero(sh, rng), true);
    ag::Var pos(test::random_tensor(sh, rng, 0.5, 2.0), true);
    const Tensor probe = test::random_tensor(sh, rng);
    auto dotp = [&](const ag::Var& v) { return ag::sum_all(ag::mul(v, ag::constant(probe))); };

    const std::vector<std::pair<const char*, std::function<ag::Var()>>> cases{
        {"add", [&] { return dotp(ag::add(x, y)); }},
        {"sub", [&] { return dotp(ag::sub(x, y)); }},
        {"mul", [&] { return dotp(ag::mul(x, y)); }},
        {"div", [&] { return dotp(ag::div(x, pos)); }},
        {"abs", [&] { return dotp(ag::abs(x)); }},
        {"square", [&] { return dotp(ag::square(x)); }},
        {"sqrt", [&] { return dotp(ag::sqrt(pos)); }},
        {"exp", [&] { return dotp(ag::exp(x)); }},
        {"log", [&] { return dotp(ag::log(pos)); }},
        {"sigmoid", [&] { return dotp(ag::sigmoid(x)); }},
        {"leaky_relu", [&] { return dotp(ag::leaky_relu(x, 0.2)); }},
        {"scalars", [&] { return dotp(ag::add_scalar(ag::mul_scalar(x, -1.7), 0.3)); }},
        {"mean", [&] { return ag::mean_all(ag::square(x)); }},
        {"sum_per_item", [&] { return ag::sum_all(ag::square(ag::sum_per_item(ag::mul(x, y)))); }},
    };
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        for (auto* leaf : {&x, &y, &pos}) {
            const auto r = check_gradient(*leaf, f, rng);
            CHECK(r.max_rel < 1e-6);
        }
    }
}

TEST_CASE("broadcast, permutation and structural op gradients")
{
    std::mt19937_64 rng(12);
    ag::Var x(test::random_tensor({2, 3, 4, 8}, rng), true);
    ag::Var m(test::random_tensor({2, 1, 4, 8}, rng, 0.5, 2.0), true);
    ag::Var s(test::random_tensor({2, 5}, rng), true);
    ag::Var k(Tensor({1}, 0.7), true);
    const std::vector<std::size_t> perm{7, 6, 5, 4, 3, 2, 1, 0};
    auto probe = [&](const ag::Var& v) {
        std::mt19937_64 r2(99);
        return ag::sum_all(ag::mul(v, ag::constant(test::random_tensor(v.shape(), r2))));
    };
    const std::vector<std::pair<const char*, std::function<ag::Var()>>> cases{
        {"mul_channel_bcast", [&] { return probe(ag::mul_channel_bcast(x, m)); }},
        {"div_channel_bcast", [&] { return probe(ag::div_channel_bcast(x, m)); }},
        {"scale_items", [&] { return probe(ag::scale_items(x, s, 3)); }},
        {"permute_columns", [&] { return probe(ag::permute_columns(x, perm)); }},
        {"scalar var", [&] { return probe(ag::add_scalar_var(ag::mul_by_scalar_var(x, k), k)); }},
        {"concat", [&] { return probe(ag::concat_channels(x, m)); }},
        {"stack_columns",
         [&] {
             const std::vector<ag::Var> cols{ag::sum_per_item(x), ag::sum_per_item(m)};
             return probe(ag::stack_columns(cols));
         }},
        {"upsample", [&] { return probe(ag::upsample_nearest2x(x)); }},
        {"avg_pool", [&] { return probe(ag::avg_pool2x2(x)); }},
        {"adaptive_pool", [&] { return probe(ag::adaptive_avg_pool(x, 3, 3)); }},
    };
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        for (auto* leaf : {&x, &m, &s, &k}) {
            const auto r = check_gradient(*leaf, f, rng);
            CHECK(r.max_rel < 1e-6);
        }
    }
}

TEST_CASE("network op gradients: conv, instance norm, attention")
{
    std::mt19937_64 rng(13);
    ag::Var x(test::random_tensor({2, 3, 4, 8}, rng), true);
    ag::Var w(test::random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5), true);
    ag::Var b(test::random_tensor({4}, rng), true);
    ag::Var g(test::random_tensor({3}, rng, 0.5, 1.5), true);
    ag::Var be(test::random_tensor({3}, rng), true);
    ag::Var wq(test::random_tensor({2, 3}, rng), true);
    ag::Var wk(test::random_tensor({2, 3}, rng), true);
    ag::Var wv(test::random_tensor({3, 3}, rng), true);
    ag::Var gate(Tensor({1}, 0.8), true);
    auto probe = [&](const ag::Var& v) {
        std::mt19937_64 r2(5);
        return ag::sum_all(ag::mul(v, ag::constant(test::random_tensor(v.shape(), r2))));
    };
    for (auto pad : {ag::PadMode::circular, ag::PadMode::zero}) {
        for (std::size_t stride : {1, 2}) {
            auto f = [&] { return probe(ag::conv2d(x, w, b, stride, pad)); };
            for (auto* leaf : {&x, &w, &b}) {
                CHECK(check_gradient(*leaf, f, rng).max_rel < 1e-6);
            }
        }
    }
    auto fn = [&] { return probe(ag::instance_norm(x, g, be)); };
    for (auto* leaf : {&x, &g, &be}) {
        CHECK(check_gradient(*leaf, fn, rng).max_rel < 1e-5);
    }
    auto fa = [&] { return probe(ag::self_attention(x, wq, wk, wv, gate)); };
    for (auto* leaf : {&x, &wq, &wk, &wv, &gate}) {
        CHECK(check_gradient(*leaf, fa, rng).max_rel < 1e-5);
    }
}

TEST_CASE("gradients accumulate across backward calls and reset with zero_grad")
{
    ag::Var x(Tensor({2}, std::vector<double>{1.0, -2.0}), true);
    ag::backward(ag::sum_all(ag::square(x)));
    ag::backward(ag::sum_all(ag::square(x)));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(-8.0));
    x.zero_grad();
    ag::backward(ag::sum_all(x));
    CHECK(x.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("NoGradGuard builds no graph and detach stops gradients")
{
    ag::Var x(Tensor({3}, 2.0), true);
    {
        ag::NoGradGuard ng;
        CHECK_FALSE(ag::grad_enabled());
        const ag::Var y = ag::mul_scalar(x, 3.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(ag::grad_enabled());
    const ag::Var y = ag::add(ag::detach(ag::square(x)), x);
    ag::backward(ag::sum_all(y));
    CHECK(x.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("shape mismatches are domain errors")
{
    ag::Var a(Tensor({2, 3}), false), b(Tensor({3, 2}), false);
    CHECK_THROWS_AS(ag::add(a, b), DomainError);
    CHECK_THROWS_AS(ag::mul(a, b), DomainError);
    ag::Var x(Tensor({1, 2, 4, 8}), false), w(Tensor({3, 5, 3, 3}), false), bias(Tensor({3}), false);
    CHECK_THROWS_AS(ag::conv2d(x, w, bias, 1, ag::PadMode::circular), DomainError);
}

#include "core/autograd.hpp"

#include "core/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace spheregen::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void check_same(const Var& a, const Var& b, const char* op)
{
    if (a.shape() != b.shape()) {
        domain_fail(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

void check_4d(const Var& x, const char* op)
{
    if (x.shape().size() != 4) {
        domain_fail(std::string(op) + ": expected N x C x H x W, got " + shape_string(x.shape()));
    }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

template <class Fwd, class Dfdx>
Var unary(const Var& x, Fwd fwd, Dfdx dfdx)
{
    Tensor out = Tensor::uninit(x.shape());
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = fwd(xv[i]);
    }
    Var xs[] = {x};
    return make_result(std::move(out), xs, [dfdx](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) {
            return;
        }
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
        }
    });
}

} // namespace

void Node::accumulate(const Tensor& g)
{
    if (grad.empty()) {
        grad = g;
    } else {
        grad += g;
    }
}

Tensor& Node::grad_buffer()
{
    if (grad.empty()) {
        grad = Tensor::zeros_like(value);
    }
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad()
{
    if (node_) {
        node_->grad = Tensor();
    }
}

double Var::item() const
{
    require(numel() == 1, "item() on a Var with " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::span<const Var> parents, std::function<void(Node&)> backward_fn)
{
    Var out(std::move(value), false);
    if (!g_grad_enabled) {
        return out;
    }
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
    if (!needs) {
        return out;
    }
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (const Var& p : parents) {
        out.node_->parents.push_back(p.node());
    }
    out.node_->backward_fn = std::move(backward_fn);
    return out;
}

void backward(const Var& loss)
{
    require(loss.numel() == 1, "backward() needs a scalar loss");
    if (!loss.requires_grad()) {
        return;
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->accumulate(Tensor(loss.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
    // Interior gradients are not needed after the sweep.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->grad = Tensor();
        }
    }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b)
{
    check_same(a, b, "add");
    Tensor out = a.value();
    out += b.value();
    Var ps[] = {a, b};
    return make_result(std::move(out), ps, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (parent(self, k).requires_grad) {
                parent(self, k).accumulate(self.grad);
            }
        }
    });
}

Var sub(const Var& a, const Var& b)
{
    check_same(a, b, "sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] -= bv[i];
    }
    Var ps[] = {a, b};
    return make_result(std::move(out), ps, [](Node& self) {
        if (parent(self, 0).requires_grad) {
            parent(self, 0).accumulate(self.grad);
        }
        if (parent(self, 1).requires_grad) {
            Tensor g = self.grad;
            g *= -1.0;
            parent(self, 1).accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b)
{
    check_same(a, b, "mul");
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a.value()[i] * b.value()[i];
    }
    Var ps[] = {a, b};
    return make_result(std::move(out), ps, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            Tensor& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] += self.grad[i] * pb.value[i];
            }
        }
        if (pb.requires_grad) {
            Tensor& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] += self.grad[i] * pa.value[i];
            }
        }
    });
}

Var div(const Var& a, const Var& b)
{
    check_same(a, b, "div");
    Tensor out = Tensor::uninit(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a.value()[i] / b.value()[i];
    }
    Var ps[] = {a, b};
    return make_result(std::move(out), ps, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            Tensor& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] += self.grad[i] / pb.value[i];
            }
        }
        if (pb.requires_grad) {
            Tensor& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] -= self.grad[i] * self.value[i] / pb.value[i];
            }
        }
    });
}

Var add_scalar(const Var& x, double c)
{
    return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& x, double c)
{
    return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Var abs(const Var& x)
{
    return unary(
        x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& x)
{
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(const Var& x)
{
    return unary(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var exp(const Var& x)
{
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x)
{
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sigmoid(const Var& x)
{
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(const Var& x, double slope)
{
    return unary(
        x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var clamp(const Var& x, double lo, double hi)
{
    return unary(
        x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Var mul_by_scalar_var(const Var& x, const Var& k)
{
    require(k.numel() == 1, "mul_by_scalar_var: k must have one element");
    const double kv = k.value()[0];
    Tensor out = x.value();
    out *= kv;
    Var ps[] = {x, k};
    return make_result(std::move(out), ps, [](Node& self) {
        Node& px = parent(self, 0);
        Node& pk = parent(self, 1);
        if (px.requires_grad) {
            Tensor& g = px.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                g[i] += self.grad[i] * pk.value[0];
            }
        }
        if (pk.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                acc += self.grad[i] * px.value[i];
            }
            pk.grad_buffer()[0] += acc;
        }
    });
}

Var add_scalar_var(const Var& x, const Var& b)
{
    require(b.numel() == 1, "add_scalar_var: b must have one element");
    Tensor out = x.value();
    for (auto& v : out.values()) {
        v += b.value()[0];
    }
    Var ps[] = {x, b};
    return make_result(std::move(out), ps, [](Node& self) {
        if (parent(self, 0).requires_grad) {
            parent(self, 0).accumulate(self.grad);
        }
        if (parent(self, 1).requires_grad) {
            double acc = 0.0;
            for (double g : self.grad.values()) {
                acc += g;
            }
            parent(self, 1).grad_buffer()[0] += acc;
        }
    });
}

namespace {

void check_channel_bcast(const Var& x, const Var& w, const char* op)
{
    check_4d(x, op);
    check_4d(w, op);
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws[0] != xs[0] || ws[1] != 1 || ws[2] != xs[2] || ws[3] != xs[3]) {
        domain_fail(std::string(op) + ": map " + shape_string(ws) + " does not broadcast over " + shape_string(xs));
    }
}

} // namespace

Var mul_channel_bcast(const Var& x, const Var& w)
{
    check_channel_bcast(x, w, "mul_channel_bcast");
    const auto& s = x.shape();
    const std::size_t C = s[1], P = s[2] * s[3];
    Tensor out(s);
    for (std::size_t n = 0; n < s[0]; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t p = 0; p < P; ++p) {
                out[(n * C + c) * P + p] = x.value()[(n * C + c) * P + p] * w.value()[n * P + p];
            }
        }
    }
    Var ps[] = {x, w};
    return make_result(std::move(out), ps, [N = s[0], C, P](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        if (px.requires_grad) {
            Tensor& g = px.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < P; ++p)
                        g[(n * C + c) * P + p] += self.grad[(n * C + c) * P + p] * pw.value[n * P + p];
        }
        if (pw.requires_grad) {
            Tensor& g = pw.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < P; ++p)
                        g[n * P + p] += self.grad[(n * C + c) * P + p] * px.value[(n * C + c) * P + p];
        }
    });
}

Var div_channel_bcast(const Var& x, const Var& w)
{
    check_channel_bcast(x, w, "div_channel_bcast");
    const auto& s = x.shape();
    const std::size_t C = s[1], P = s[2] * s[3];
    Tensor out(s);
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p)
                out[(n * C + c) * P + p] = x.value()[(n * C + c) * P + p] / w.value()[n * P + p];
    Var ps[] = {x, w};
    return make_result(std::move(out), ps, [N = s[0], C, P](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        if (px.requires_grad) {
            Tensor& g = px.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < P; ++p)
                        g[(n * C + c) * P + p] += self.grad[(n * C + c) * P + p] / pw.value[n * P + p];
        }
        if (pw.requires_grad) {
            Tensor& g = pw.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t p = 0; p < P; ++p) {
                        const std::size_t i = (n * C + c) * P + p;
                        g[n * P + p] -= self.grad[i] * self.value[i] / pw.value[n * P + p];
                    }
        }
    });
}

Var scale_items(const Var& x, const Var& s, std::size_t column)
{
    require(x.shape().size() >= 1 && s.shape().size() == 2 && s.shape()[0] == x.shape()[0] && column < s.shape()[1],
            "scale_items: incompatible shapes " + shape_string(x.shape()) + " / " + shape_string(s.shape()));
    const std::size_t N = x.shape()[0], K = s.shape()[1], stride = x.numel() / N;
    Tensor out = Tensor::uninit(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const double k = s.value()[n * K + column];
        for (std::size_t i = 0; i < stride; ++i) {
            out[n * stride + i] = x.value()[n * stride + i] * k;
        }
    }
    Var ps[] = {x, s};
    return make_result(std::move(out), ps, [N, K, stride, column](Node& self) {
        Node& px = parent(self, 0);
        Node& pscale = parent(self, 1);
        if (px.requires_grad) {
            Tensor& g = px.grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                const double k = pscale.value[n * K + column];
                for (std::size_t i = 0; i < stride; ++i) {
                    g[n * stride + i] += self.grad[n * stride + i] * k;
                }
            }
        }
        if (pscale.requires_grad) {
            Tensor& g = pscale.grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                double acc = 0.0;
                for (std::size_t i = 0; i < stride; ++i) {
                    acc += self.grad[n * stride + i] * px.value[n * stride + i];
                }
                g[n * K + column] += acc;
            }
        }
    });
}

Var permute_columns(const Var& x, std::span<const std::size_t> source_col)
{
    require(!x.shape().empty(), "permute_columns on scalar");
    const std::size_t W = x.shape().back();
    require(source_col.size() == W, "permute_columns: map length does not match width");
    const std::size_t rows = x.numel() / W;
    std::vector<std::size_t> map(source_col.begin(), source_col.end());
    Tensor out = Tensor::uninit(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.value().data() + r * W;
        double* dst = out.data() + r * W;
        for (std::size_t j = 0; j < W; ++j) {
            dst[j] = src[map[j]];
        }
    }
    Var ps[] = {x};
    return make_result(std::move(out), ps, [map = std::move(map), rows, W](Node& self) {
        Node& px = parent(self, 0);
        if (!px.requires_grad) {
            return;
        }
        Tensor& g = px.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < W; ++j) {
                g[r * W + map[j]] += self.grad[r * W + j];
            }
        }
    });
}

Var sum_all(const Var& x)
{
    double s = 0.0;
    for (double v : x.value().values()) {
        s += v;
    }
    Var ps[] = {x};
    return make_result(Tensor({1}, s), ps, [](Node& self) {
        Node& px = parent(self, 0);
        if (!px.requires_grad) {
            return;
        }
        Tensor& g = px.grad_buffer();
        for (auto& v : g.values()) {
            v += self.grad[0];
        }
    });
}

Var mean_all(const Var& x) { return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Var sum_per_item(const Var& x)
{
    require(!x.shape().empty(), "sum_per_item on scalar");
    const std::size_t N = x.shape()[0], stride = x.numel() / N;
    Tensor out({N});
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t i = 0; i < stride; ++i) {
            s += x.value()[n * stride + i];
        }
        out[n] = s;
    }
    Var ps[] = {x};
    return make_result(std::move(out), ps, [N, stride](Node& self) {
        Node& px = parent(self, 0);
        if (!px.requires_grad) {
            return;
        }
        Tensor& g = px.grad_buffer();
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < stride; ++i) {
                g[n * stride + i] += self.grad[n];
            }
        }
    });
}

Var stack_columns(std::span<const Var> cols)
{
    require(!cols.empty(), "stack_columns on empty list");
    const std::size_t N = cols.front().numel(), K = cols.size();
    Tensor out({N, K});
    for (std::size_t k = 0; k < K; ++k) {
        require(cols[k].shape() == Shape{N}, "stack_columns expects [N] vectors");
        for (std::size_t n = 0; n < N; ++n) {
            out[n * K + k] = cols[k].value()[n];
        }
    }
    return make_result(std::move(out), cols, [N, K](Node& self) {
        for (std::size_t k = 0; k < K; ++k) {
            Node& p = parent(self, k);
            if (!p.requires_grad) {
                continue;
            }
            Tensor& g = p.grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                g[n] += self.grad[n * K + k];
            }
        }
    });
}

Var concat_channels(const Var& a, const Var& b)
{
    check_4d(a, "concat_channels");
    check_4d(b, "concat_channels");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat_channels: " + shape_string(sa) + " vs " + shape_string(sb));
    const std::size_t N = sa[0], P = sa[2] * sa[3], Ca = sa[1], Cb = sb[1];
    Tensor out = Tensor::uninit({N, Ca + Cb, sa[2], sa[3]});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.value().data() + n * Ca * P, Ca * P, out.data() + n * (Ca + Cb) * P);
        std::copy_n(b.value().data() + n * Cb * P, Cb * P, out.data() + n * (Ca + Cb) * P + Ca * P);
    }
    Var ps[] = {a, b};
    return make_result(std::move(out), ps, [N, P, Ca, Cb](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            Tensor& g = pa.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < Ca * P; ++i)
                    g[n * Ca * P + i] += self.grad[n * (Ca + Cb) * P + i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < Cb * P; ++i)
                    g[n * Cb * P + i] += self.grad[n * (Ca + Cb) * P + Ca * P + i];
        }
    });
}

namespace {

struct ConvGeom {
    std::size_t cin, h, w, k, stride, pad, ho, wo;
    PadMode mode;
};

// Reusable per-thread buffer for column matrices.
double* scratch(std::size_t n)
{
    thread_local Storage buf;
    if (buf.size() < n) {
        buf.resize(n);
    }
    return buf.data();
}

// Valid output range [lo, hi) whose source column ox * stride + d lies inside [0, w).
std::pair<std::size_t, std::size_t> interior(std::ptrdiff_t d, const ConvGeom& g)
{
    const auto W = static_cast<std::ptrdiff_t>(g.w);
    const auto S = static_cast<std::ptrdiff_t>(g.stride);
    const std::ptrdiff_t lo = d < 0 ? (-d + S - 1) / S : 0;
    const std::ptrdiff_t hi = W - d > 0 ? (W - d + S - 1) / S : 0;
    const auto clamp = [&](std::ptrdiff_t v) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(g.wo)));
    };
    return {clamp(lo), std::max(clamp(lo), clamp(hi))};
}

std::size_t wrap(std::ptrdiff_t ix, std::size_t w)
{
    const auto W = static_cast<std::ptrdiff_t>(w);
    return static_cast<std::size_t>(((ix % W) + W) % W);
}

// col is [cin*k*k x ho*wo] row-major.
void im2col(const double* x, const ConvGeom& g, double* col)
{
    const std::size_t P = g.ho * g.wo;
    for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto d = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
        const auto [lo, hi] = interior(d, g);
        for (std::size_t c = 0; c < g.cin; ++c) {
            for (std::size_t ky = 0; ky < g.k; ++ky) {
                double* row = col + ((c * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill_n(dst, g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < lo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride) + d;
                        dst[ox] = g.mode == PadMode::zero ? 0.0 : src[wrap(ix, g.w)];
                    }
                    if (g.stride == 1) {
                        std::copy(src + static_cast<std::ptrdiff_t>(lo) + d, src + static_cast<std::ptrdiff_t>(hi) + d,
                                  dst + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) {
                            dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + d];
                        }
                    }
                    for (std::size_t ox = hi; ox < g.wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride) + d;
                        dst[ox] = g.mode == PadMode::zero ? 0.0 : src[wrap(ix, g.w)];
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const ConvGeom& g, double* dx)
{
    const std::size_t P = g.ho * g.wo;
    for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto d = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
        const auto [lo, hi] = interior(d, g);
        for (std::size_t c = 0; c < g.cin; ++c) {
            for (std::size_t ky = 0; ky < g.k; ++ky) {
                const double* row = col + ((c * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        continue;
                    }
                    double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const double* src = row + oy * g.wo;
                    if (g.mode == PadMode::circular) {
                        for (std::size_t ox = 0; ox < lo; ++ox) {
                            dst[wrap(static_cast<std::ptrdiff_t>(ox * g.stride) + d, g.w)] += src[ox];
                        }
                        for (std::size_t ox = hi; ox < g.wo; ++ox) {
                            dst[wrap(static_cast<std::ptrdiff_t>(ox * g.stride) + d, g.w)] += src[ox];
                        }
                    }
                    double* base = dst + d;
                    for (std::size_t ox = lo; ox < hi; ++ox) {
                        base[ox * g.stride] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, PadMode pad)
{
    check_4d(x, "conv2d");
    check_4d(weight, "conv2d weight");
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    const std::size_t N = xs[0], cout = ws[0], k = ws[2];
    require(ws[1] == xs[1] && ws[3] == k && (k % 2) == 1,
            "conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
    require(bias.shape() == Shape{cout}, "conv2d: bias shape");
    require(stride >= 1, "conv2d: stride must be positive");
    ConvGeom g{xs[1], xs[2], xs[3], k, stride, (k - 1) / 2, 0, 0, pad};
    require(g.h + 2 * g.pad >= k && g.w + 2 * g.pad >= k, "conv2d: input smaller than kernel");
    require(g.pad <= g.w, "conv2d: circular pad wider than input");
    g.ho = (g.h + 2 * g.pad - k) / stride + 1;
    g.wo = (g.w + 2 * g.pad - k) / stride + 1;
    const std::size_t K = g.cin * k * k, P = g.ho * g.wo;

    Tensor out = Tensor::uninit({N, cout, g.ho, g.wo});
    double* col = scratch(K * P);
    ConstMatMap wm(weight.value().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < N; ++n) {
        im2col(x.value().data() + n * g.cin * g.h * g.w, g, col);
        ConstMatMap cm(col, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        MatMap om(out.data() + n * cout * P, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(P));
        om.noalias() = wm * cm;
        for (std::size_t c = 0; c < cout; ++c) {
            om.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];
        }
    }
    Var ps[] = {x, weight, bias};
    return make_result(std::move(out), ps, [g, N, cout, K, P](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        Node& pb = parent(self, 2);
        double* col = scratch(K * P);
        ConstMatMap wm(pw.value.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
        const std::size_t in_stride = g.cin * g.h * g.w;
        for (std::size_t n = 0; n < N; ++n) {
            ConstMatMap gm(self.grad.data() + n * cout * P, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(P));
            if (pb.requires_grad) {
                Tensor& gb = pb.grad_buffer();
                for (std::size_t c = 0; c < cout; ++c) {
                    gb[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
                }
            }
            if (pw.requires_grad) {
                im2col(px.value.data() + n * in_stride, g, col);
                ConstMatMap cm(col, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                MatMap gw(pw.grad_buffer().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(K));
                gw.noalias() += gm * cm.transpose();
            }
            if (px.requires_grad) {
                MatMap cm(col, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                cm.noalias() = wm.transpose() * gm;
                col2im(col, g, px.grad_buffer().data() + n * in_stride);
            }
        }
    });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps)
{
    check_4d(x, "instance_norm");
    const auto& s = x.shape();
    const std::size_t N = s[0], C = s[1], P = s[2] * s[3];
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "instance_norm: affine shape");
    Tensor out(s);
    Tensor xhat(s);
    std::vector<double> inv_std(N * C);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* xi = x.value().data() + (n * C + c) * P;
            double mean = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                mean += xi[p];
            }
            mean /= static_cast<double>(P);
            double var = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                var += (xi[p] - mean) * (xi[p] - mean);
            }
            var /= static_cast<double>(P);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[n * C + c] = is;
            for (std::size_t p = 0; p < P; ++p) {
                const double h = (xi[p] - mean) * is;
                xhat[(n * C + c) * P + p] = h;
                out[(n * C + c) * P + p] = h * gamma.value()[c] + beta.value()[c];
            }
        }
    }
    Var ps[] = {x, gamma, beta};
    return make_result(std::move(out), ps,
                       [N, C, P, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           Node& px = parent(self, 0);
                           Node& pg = parent(self, 1);
                           Node& pbeta = parent(self, 2);
                           for (std::size_t n = 0; n < N; ++n) {
                               for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t base = (n * C + c) * P;
                                   double sum_g = 0.0, sum_gh = 0.0;
                                   for (std::size_t p = 0; p < P; ++p) {
                                       sum_g += self.grad[base + p];
                                       sum_gh += self.grad[base + p] * xhat[base + p];
                                   }
                                   if (pg.requires_grad) {
                                       pg.grad_buffer()[c] += sum_gh;
                                   }
                                   if (pbeta.requires_grad) {
                                       pbeta.grad_buffer()[c] += sum_g;
                                   }
                                   if (px.requires_grad) {
                                       Tensor& gx = px.grad_buffer();
                                       const double gm = pg.value[c];
                                       const double mg = sum_g / static_cast<double>(P);
                                       const double mgh = sum_gh / static_cast<double>(P);
                                       for (std::size_t p = 0; p < P; ++p) {
                                           gx[base + p] += gm * inv_std[n * C + c] *
                                                           (self.grad[base + p] - mg - xhat[base + p] * mgh);
                                       }
                                   }
                               }
                           }
                       });
}

Var upsample_nearest2x(const Var& x)
{
    check_4d(x, "upsample_nearest2x");
    const auto& s = x.shape();
    const std::size_t NC = s[0] * s[1], H = s[2], W = s[3];
    Tensor out = Tensor::uninit({s[0], s[1], 2 * H, 2 * W});
    for (std::size_t m = 0; m < NC; ++m) {
        for (std::size_t y = 0; y < 2 * H; ++y) {
            for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                out[(m * 2 * H + y) * 2 * W + xx] = x.value()[(m * H + y / 2) * W + xx / 2];
            }
        }
    }
    Var ps[] = {x};
    return make_result(std::move(out), ps, [NC, H, W](Node& self) {
        Node& px = parent(self, 0);
        if (!px.requires_grad) {
            return;
        }
        Tensor& g = px.grad_buffer();
        for (std::size_t m = 0; m < NC; ++m)
            for (std::size_t y = 0; y < 2 * H; ++y)
                for (std::size_t xx = 0; xx < 2 * W; ++xx)
                    g[(m * H + y / 2) * W + xx / 2] += self.grad[(m * 2 * H + y) * 2 * W + xx];
    });
}

Var avg_pool2x2(const Var& x)
{
    check_4d(x, "avg_pool2x2");
    const auto& s = x.shape();
    require(s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2x2 needs even spatial dims");
    return adaptive_avg_pool(x, s[2] / 2, s[3] / 2);
}

Var adaptive_avg_pool(const Var& x, std::size_t out_h, std::size_t out_w)
{
    check_4d(x, "adaptive_avg_pool");
    const auto& s = x.shape();
    const std::size_t NC = s[0] * s[1], H = s[2], W = s[3];
    require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: empty output");
    // Bin i covers [floor(i*H/oh), ceil((i+1)*H/oh)).
    auto bins = [](std::size_t in, std::size_t outn) {
        std::vector<std::pair<std::size_t, std::size_t>> b(outn);
        for (std::size_t i = 0; i < outn; ++i) {
            b[i] = {(i * in) / outn, ((i + 1) * in + outn - 1) / outn};
        }
        return b;
    };
    auto by = bins(H, out_h);
    auto bx = bins(W, out_w);
    Tensor out({s[0], s[1], out_h, out_w});
    for (std::size_t m = 0; m < NC; ++m) {
        for (std::size_t i = 0; i < out_h; ++i) {
            for (std::size_t j = 0; j < out_w; ++j) {
                double acc = 0.0;
                for (std::size_t y = by[i].first; y < by[i].second; ++y)
                    for (std::size_t xx = bx[j].first; xx < bx[j].second; ++xx)
                        acc += x.value()[(m * H + y) * W + xx];
                const auto area = static_cast<double>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
                out[(m * out_h + i) * out_w + j] = acc / area;
            }
        }
    }
    Var ps[] = {x};
    return make_result(std::move(out), ps, [NC, H, W, out_h, out_w, by, bx](Node& self) {
        Node& px = parent(self, 0);
        if (!px.requires_grad) {
            return;
        }
        Tensor& g = px.grad_buffer();
        for (std::size_t m = 0; m < NC; ++m)
            for (std::size_t i = 0; i < out_h; ++i)
                for (std::size_t j = 0; j < out_w; ++j) {
                    const auto area =
                        static_cast<double>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
                    const double gv = self.grad[(m * out_h + i) * out_w + j] / area;
                    for (std::size_t y = by[i].first; y < by[i].second; ++y)
                        for (std::size_t xx = bx[j].first; xx < bx[j].second; ++xx)
                            g[(m * H + y) * W + xx] += gv;
                }
    });
}

Var self_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& gamma)
{
    check_4d(x, "self_attention");
    const auto& s = x.shape();
    const std::size_t N = s[0], C = s[1], P = s[2] * s[3];
    const std::size_t Cq = wq.shape()[0];
    require(wq.shape() == Shape{Cq, C} && wk.shape() == Shape{Cq, C} && wv.shape() == Shape{C, C} &&
                gamma.numel() == 1,
            "self_attention: projection shapes");
    const auto iC = static_cast<Eigen::Index>(C), iP = static_cast<Eigen::Index>(P),
               iCq = static_cast<Eigen::Index>(Cq);
    ConstMatMap Wq(wq.value().data(), iCq, iC), Wk(wk.value().data(), iCq, iC), Wv(wv.value().data(), iC, iC);
    const double gm = gamma.value()[0];

    Tensor out(s);
    // Per item: attention matrix A (P x P) and the attended values O (C x P).
    auto attn = std::make_shared<std::vector<RowMat>>(N);
    auto attended = std::make_shared<std::vector<RowMat>>(N);
    for (std::size_t n = 0; n < N; ++n) {
        ConstMatMap X(x.value().data() + n * C * P, iC, iP);
        RowMat Q = Wq * X, K = Wk * X, V = Wv * X;
        RowMat S = Q.transpose() * K;
        for (Eigen::Index i = 0; i < iP; ++i) {
            const double m = S.row(i).maxCoeff();
            S.row(i) = (S.row(i).array() - m).exp();
            S.row(i) /= S.row(i).sum();
        }
        RowMat O = V * S.transpose();
        MatMap Y(out.data() + n * C * P, iC, iP);
        Y = gm * O + X;
        (*attn)[n] = std::move(S);
        (*attended)[n] = std::move(O);
    }
    Var ps[] = {x, wq, wk, wv, gamma};
    return make_result(std::move(out), ps, [N, C, P, Cq, attn, attended](Node& self) {
        Node& px = parent(self, 0);
        Node& pq = parent(self, 1);
        Node& pk = parent(self, 2);
        Node& pv = parent(self, 3);
        Node& pg = parent(self, 4);
        const auto iC = static_cast<Eigen::Index>(C), iP = static_cast<Eigen::Index>(P),
                   iCq = static_cast<Eigen::Index>(Cq);
        ConstMatMap Wq(pq.value.data(), iCq, iC), Wk(pk.value.data(), iCq, iC), Wv(pv.value.data(), iC, iC);
        const double gm = pg.value[0];
        for (std::size_t n = 0; n < N; ++n) {
            ConstMatMap X(px.value.data() + n * C * P, iC, iP);
            ConstMatMap dY(self.grad.data() + n * C * P, iC, iP);
            const RowMat& A = (*attn)[n];
            const RowMat& O = (*attended)[n];
            if (pg.requires_grad) {
                pg.grad_buffer()[0] += (dY.array() * O.array()).sum();
            }
            RowMat dO = gm * dY;
            RowMat Q = Wq * X, K = Wk * X, V = Wv * X;
            RowMat dV = dO * A;
            RowMat dA = dO.transpose() * V;
            Eigen::VectorXd rs = (dA.array() * A.array()).rowwise().sum();
            RowMat dS = A.array() * (dA.colwise() - rs).array();
            RowMat dQ = K * dS.transpose();
            RowMat dK = Q * dS;
            if (pq.requires_grad) {
                MatMap(pq.grad_buffer().data(), iCq, iC).noalias() += dQ * X.transpose();
            }
            if (pk.requires_grad) {
                MatMap(pk.grad_buffer().data(), iCq, iC).noalias() += dK * X.transpose();
            }
            if (pv.requires_grad) {
                MatMap(pv.grad_buffer().data(), iC, iC).noalias() += dV * X.transpose();
            }
            if (px.requires_grad) {
                MatMap dX(px.grad_buffer().data() + n * C * P, iC, iP);
                dX += dY;
                dX.noalias() += Wq.transpose() * dQ;
                dX.noalias() += Wk.transpose() * dK;
                dX.noalias() += Wv.transpose() * dV;
            }
        }
    });
}

} // namespace spheregen::ag

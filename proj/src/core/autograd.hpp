#pragma once

// Minimal reverse-mode automatic differentiation over Tensor.
//
// A Var is a shared handle to a graph node. Ops build nodes that remember
// their parents and a backward closure; backward() walks the graph in
// reverse topological order. Leaf Vars created with requires_grad = true
// (parameters) accumulate gradients until zero_grad() is called.

#include "core/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace spheregen::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Tensor& g);
    // Gradient buffer for in-place accumulation; allocated on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }
    void zero_grad();

    // Scalar value of a one-element Var.
    double item() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Var make_result(Tensor, std::span<const Var>, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
void backward(const Var& loss);

bool grad_enabled();

// Disables graph construction for its lifetime (evaluation / inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Builds an op result; the closure is dropped when no parent needs a gradient.
Var make_result(Tensor value, std::span<const Var> parents, std::function<void(Node&)> backward_fn);

Var constant(Tensor value);
Var detach(const Var& x);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& x, double c);
Var mul_scalar(const Var& x, double c);
Var abs(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sigmoid(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var clamp(const Var& x, double lo, double hi);

// x times / plus a one-element Var (trainable scalar).
Var mul_by_scalar_var(const Var& x, const Var& k);
Var add_scalar_var(const Var& x, const Var& b);

// Broadcast a per-pixel map [N x 1 x H x W] across channels of x [N x C x H x W].
Var mul_channel_bcast(const Var& x, const Var& w);
Var div_channel_bcast(const Var& x, const Var& w);

// x[n, ...] * s[n, column] for s of shape [N x K].
Var scale_items(const Var& x, const Var& s, std::size_t column);

// out[..., j] = x[..., source_col[j]] along the last axis.
Var permute_columns(const Var& x, std::span<const std::size_t> source_col);

// Reductions.
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_per_item(const Var& x); // [N x ...] -> [N]
Var stack_columns(std::span<const Var> cols); // K vectors [N] -> [N x K]
Var concat_channels(const Var& a, const Var& b);

enum class PadMode { circular, zero };

// 2-D convolution; padding (k-1)/2 on every side, horizontal edges per `pad`,
// vertical edges always zero.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, PadMode pad);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var upsample_nearest2x(const Var& x);
Var avg_pool2x2(const Var& x);
Var adaptive_avg_pool(const Var& x, std::size_t out_h, std::size_t out_w);

// Dot-product self-attention with residual gate:
// out = gamma * V softmax(Q^T K)^T + x, Q/K/V from 1x1 projections.
Var self_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& gamma);

} // namespace spheregen::ag

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode automatic differentiation over dense double arrays.
// Feature maps are laid out channel-first ([C, H, W]); matrices are
// row-major ([rows, cols]). Every op records its parents and a closure that
// accumulates gradients into them; backward() walks the graph in reverse
// topological order.

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mgd::ad {

struct NdArray {
    std::vector<int> shape;
    std::vector<double> data;

    NdArray() = default;
    explicit NdArray(std::vector<int> s, double fill = 0.0);
    NdArray(std::vector<int> s, std::vector<double> d);

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::string shape_string() const;
};

struct Node {
    NdArray value;
    NdArray grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    // Adds g into grad, allocating on first use.
    void accumulate(std::span<const double> g);
    NdArray& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const NdArray& value() const { return node_->value; }
    NdArray& mutable_value() { return node_->value; }
    const NdArray& grad() const { return node_->grad; }
    const std::vector<int>& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    void zero_grad() { node_->grad.data.clear(); node_->grad.shape.clear(); }
    double item() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(NdArray value);
Var parameter(NdArray value);

// Seeds d(loss)/d(loss) = 1 and propagates. loss must be a single element.
void backward(const Var& loss);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// x: [C, H, W], bias: [C]
Var add_channel_bias(const Var& x, const Var& bias);
// x: [N, M], bias: [M]
Var add_row_bias(const Var& x, const Var& bias);

// x: [C, H, W], weight: [O, C, k, k], bias: [O] (may be undefined).
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
// Nearest-neighbour 2x upsampling cropped to (out_h, out_w).
Var upsample2x(const Var& x, int out_h, int out_w);

Var concat(const std::vector<Var>& parts);  // along dim 0
Var slice(const Var& x, int begin, int count);  // along dim 0
Var reshape(const Var& x, std::vector<int> shape);

Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
Var transpose(const Var& a);             // [M,N] -> [N,M]
Var softmax_rows(const Var& a);
// x: [C, N]; each column scaled to unit L2 norm.
Var normalize_columns(const Var& x, double eps = 1e-8);

Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);
Var l1(const Var& a, const Var& b);

}  // namespace mgd::ad

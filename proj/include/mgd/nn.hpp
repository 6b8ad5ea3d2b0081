// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mgd/autodiff.hpp"
#include "mgd/rng.hpp"
#include "mgd/tensor.hpp"

namespace mgd::nn {

using ad::Var;

// Parameters in declaration order; names are informational.
using ParamList = std::vector<std::pair<std::string, Var>>;

// He-style uniform init in [-sqrt(6/fan_in), sqrt(6/fan_in)].
ad::NdArray he_uniform(std::vector<int> shape, int fan_in, Rng& rng);

struct Conv2d {
    Var weight;  // [out, in, k, k]
    Var bias;    // [out]
    int stride = 1;
    int padding = 0;

    Conv2d() = default;
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng);

    int in_channels() const { return weight.value().dim(1); }
    int out_channels() const { return weight.value().dim(0); }
    int kernel() const { return weight.value().dim(2); }

    Var operator()(const Var& x) const { return ad::conv2d(x, weight, bias, stride, padding); }
    void collect(ParamList& out, const std::string& prefix) const;
};

struct Linear {
    Var weight;  // [out, in]
    Var bias;    // [out]

    Linear() = default;
    Linear(int in_features, int out_features, Rng& rng);

    // x: [N, in] -> [N, out]
    Var operator()(const Var& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// Single-head cross-attention from spatial features [C, H, W] to context
// tokens [L, d]; residual is added by the caller.
struct CrossAttention {
    Linear query;
    Linear key;
    Linear value;
    Linear output;

    CrossAttention() = default;
    CrossAttention(int channels, int context_dim, Rng& rng);

    Var operator()(const Var& features, const Var& context) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

// Tensor3 (HWC) <-> channel-first array.
ad::NdArray to_chw(const Tensor3& t);
Tensor3 from_chw(const ad::NdArray& a);

std::size_t parameter_count(const ParamList& params);
void zero_grad(const ParamList& params);
std::vector<ad::NdArray> snapshot(const ParamList& params);
void restore(const ParamList& params, const std::vector<ad::NdArray>& values);

class Adam {
public:
    explicit Adam(ParamList params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void step();
    void zero_grad() { nn::zero_grad(params_); }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    ParamList params_;
    double lr_, beta1_, beta2_, eps_;
    long step_count_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace mgd::nn

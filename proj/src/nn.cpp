// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/nn.hpp"

#include <cmath>

#include "mgd/error.hpp"

namespace mgd::nn {

ad::NdArray he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    ad::NdArray out(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : out.data) v = rng.uniform(-bound, bound);
    return out;
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int padding_, Rng& rng)
    : weight(ad::parameter(he_uniform({out_channels, in_channels, kernel, kernel},
                                      in_channels * kernel * kernel, rng))),
      bias(ad::parameter(ad::NdArray({out_channels}, 0.0))),
      stride(stride_),
      padding(padding_) {}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

Linear::Linear(int in_features, int out_features, Rng& rng)
    : weight(ad::parameter(he_uniform({out_features, in_features}, in_features, rng))),
      bias(ad::parameter(ad::NdArray({out_features}, 0.0))) {}

Var Linear::operator()(const Var& x) const {
    return ad::add_row_bias(ad::matmul(x, ad::transpose(weight)), bias);
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

CrossAttention::CrossAttention(int channels, int context_dim, Rng& rng)
    : query(channels, channels, rng),
      key(context_dim, channels, rng),
      value(context_dim, channels, rng),
      output(channels, channels, rng) {
    // Small output projection keeps the residual branch close to identity at init.
    for (auto& w : output.weight.mutable_value().data) w *= 0.1;
}

Var CrossAttention::operator()(const Var& features, const Var& context) const {
    const auto& shape = features.shape();
    const int c = shape[0], h = shape[1], w = shape[2];
    const Var tokens = ad::transpose(ad::reshape(features, {c, h * w}));  // [HW, C]
    const Var q = query(tokens);
    const Var k = key(context);
    const Var v = value(context);
    const Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(c)));
    const Var attended = output(ad::matmul(ad::softmax_rows(scores), v));  // [HW, C]
    return ad::reshape(ad::transpose(attended), {c, h, w});
}

void CrossAttention::collect(ParamList& out, const std::string& prefix) const {
    query.collect(out, prefix + ".q");
    key.collect(out, prefix + ".k");
    value.collect(out, prefix + ".v");
    output.collect(out, prefix + ".out");
}

ad::NdArray to_chw(const Tensor3& t) {
    ad::NdArray out({t.channels(), t.height(), t.width()});
    for (int c = 0; c < t.channels(); ++c) {
        for (int y = 0; y < t.height(); ++y) {
            for (int x = 0; x < t.width(); ++x) {
                out.data[(static_cast<std::size_t>(c) * t.height() + y) * t.width() + x] = t.at(y, x, c);
            }
        }
    }
    return out;
}

Tensor3 from_chw(const ad::NdArray& a) {
    require(a.rank() == 3, "from_chw expects [C,H,W], got " + a.shape_string());
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    Tensor3 out(h, w, c);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out.at(y, x, ch) = a.data[(static_cast<std::size_t>(ch) * h + y) * w + x];
            }
        }
    }
    return out;
}

std::size_t parameter_count(const ParamList& params) {
    std::size_t total = 0;
    for (const auto& [name, p] : params) total += p.value().numel();
    return total;
}

void zero_grad(const ParamList& params) {
    for (const auto& [name, p] : params) {
        Var copy = p;
        copy.zero_grad();
    }
}

std::vector<ad::NdArray> snapshot(const ParamList& params) {
    std::vector<ad::NdArray> out;
    out.reserve(params.size());
    for (const auto& [name, p] : params) out.push_back(p.value());
    return out;
}

void restore(const ParamList& params, const std::vector<ad::NdArray>& values) {
    require(values.size() == params.size(), "parameter count mismatch on restore");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var p = params[i].second;
        require(p.value().shape == values[i].shape,
                "parameter " + params[i].first + " shape mismatch on restore");
        p.mutable_value() = values[i];
    }
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.value().numel(), 0.0);
        v_.emplace_back(p.value().numel(), 0.0);
    }
}

void Adam::step() {
    ++step_count_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var p = params_[i].second;
        const auto& g = p.grad().data;
        if (g.empty()) continue;
        auto& value = p.mutable_value().data;
        for (std::size_t j = 0; j < value.size(); ++j) {
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
            value[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
        }
    }
}

}  // namespace mgd::nn

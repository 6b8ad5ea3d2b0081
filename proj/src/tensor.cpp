// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mgd/error.hpp"

namespace mgd {

Tensor3::Tensor3(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
    require(height >= 0 && width >= 0 && channels >= 0, "negative tensor dimension");
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Tensor3::Tensor3(int height, int width, int channels, std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    require(height >= 0 && width >= 0 && channels >= 0, "negative tensor dimension");
    require(data_.size() == static_cast<std::size_t>(height) * width * channels,
            "tensor data length does not match shape");
}

std::string Tensor3::shape_string() const {
    std::ostringstream out;
    out << "(" << height_ << "," << width_ << "," << channels_ << ")";
    return out.str();
}

bool Tensor3::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor3::all_in_range(double lo, double hi) const {
    return std::all_of(data_.begin(), data_.end(),
                       [=](double v) { return std::isfinite(v) && v >= lo && v <= hi; });
}

Tensor3 Tensor3::slice_channels(int begin, int count) const {
    require(begin >= 0 && count >= 0 && begin + count <= channels_, "channel slice out of range");
    Tensor3 out(height_, width_, count);
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            for (int c = 0; c < count; ++c) {
                out.at(y, x, c) = at(y, x, begin + c);
            }
        }
    }
    return out;
}

Tensor3 concat_channels(std::span<const Tensor3> parts) {
    require(!parts.empty(), "nothing to concatenate");
    const int h = parts.front().height();
    const int w = parts.front().width();
    int total = 0;
    for (const auto& p : parts) {
        require(p.height() == h && p.width() == w,
                "grid mismatch: " + p.shape_string() + " vs " + parts.front().shape_string());
        total += p.channels();
    }
    Tensor3 out(h, w, total);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int offset = 0;
            for (const auto& p : parts) {
                for (int c = 0; c < p.channels(); ++c) {
                    out.at(y, x, offset + c) = p.at(y, x, c);
                }
                offset += p.channels();
            }
        }
    }
    return out;
}

double max_abs_diff(const Tensor3& a, const Tensor3& b) {
    require(a.same_shape(b), "shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

Image::Image(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == 3, "image must have 3 channels, got " + shape_string());
    require(all_in_range(0.0, 1.0), "image values must be finite and in [0,1]");
}

Latent::Latent(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == kChannels, "latent must have 4 channels, got " + shape_string());
    require(all_finite(), "latent values must be finite");
}

PoseMap::PoseMap(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == kChannels, "pose map must have 18 channels, got " + shape_string());
    require(all_in_range(0.0, 1.0), "pose map values must be in [0,1]");
}

SketchImage::SketchImage(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == 1, "sketch must have 1 channel, got " + shape_string());
    require(all_in_range(0.0, 1.0), "sketch values must be in [0,1]");
}

BinaryMask::BinaryMask(int height, int width, double fill) : Tensor3(height, width, 1, fill) {
    require(fill == 0.0 || fill == 1.0, "mask fill must be 0 or 1");
}

BinaryMask::BinaryMask(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == 1, "mask must have 1 channel, got " + shape_string());
    require(std::all_of(data_.begin(), data_.end(), [](double v) { return v == 0.0 || v == 1.0; }),
            "mask values must be 0 or 1");
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1.0));
}

}  // namespace mgd

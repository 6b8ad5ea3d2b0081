// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mgd {

// Dense height x width x channels grid, channel-interleaved (HWC).
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(int height, int width, int channels, double fill = 0.0);
    Tensor3(int height, int width, int channels, std::vector<double> data);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Tensor3& other) const {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    std::string shape_string() const;

    bool all_finite() const;
    bool all_in_range(double lo, double hi) const;

    // Channels [begin, begin + count).
    Tensor3 slice_channels(int begin, int count) const;

    friend bool operator==(const Tensor3&, const Tensor3&) = default;

protected:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

// Channel concatenation of grids sharing height and width.
Tensor3 concat_channels(std::span<const Tensor3> parts);

double max_abs_diff(const Tensor3& a, const Tensor3& b);

// RGB image, values in [0,1].
class Image : public Tensor3 {
public:
    Image() = default;
    Image(int height, int width, double fill = 0.0) : Tensor3(height, width, 3, fill) {}
    // Validates channel count, finiteness and range.
    explicit Image(Tensor3 t);
};

// Autoencoder latent, 4 channels at 1/8 resolution.
class Latent : public Tensor3 {
public:
    static constexpr int kChannels = 4;
    Latent() = default;
    Latent(int height, int width, double fill = 0.0) : Tensor3(height, width, kChannels, fill) {}
    explicit Latent(Tensor3 t);
};

// 18-channel keypoint heatmap.
class PoseMap : public Tensor3 {
public:
    static constexpr int kChannels = 18;
    PoseMap() = default;
    PoseMap(int height, int width) : Tensor3(height, width, kChannels, 0.0) {}
    explicit PoseMap(Tensor3 t);
};

// Single-channel stroke image, 1 = stroke.
class SketchImage : public Tensor3 {
public:
    SketchImage() = default;
    SketchImage(int height, int width, double fill = 0.0) : Tensor3(height, width, 1, fill) {}
    explicit SketchImage(Tensor3 t);
};

// Single-channel binary mask.
class BinaryMask : public Tensor3 {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width, double fill = 0.0);
    explicit BinaryMask(Tensor3 t);

    bool is_set(int y, int x) const { return at(y, x, 0) > 0.5; }
    std::size_t count() const;
};

// 1 = region to regenerate.
class InpaintMask : public BinaryMask {
public:
    using BinaryMask::BinaryMask;
};

// 1 = keep the original pixel (face / head region).
class HeadMask : public BinaryMask {
public:
    using BinaryMask::BinaryMask;
};

}  // namespace mgd

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "mgd/autodiff.hpp"
#include "mgd/nn.hpp"
#include "mgd/tensor.hpp"

namespace mgd::codec {

inline constexpr int kDownsample = 8;

enum class CodecKind { reference, trainable };

struct CodecConfig {
    CodecKind kind = CodecKind::reference;
    std::uint64_t seed = 0;
    int latent_channels = Latent::kChannels;
};

void validate(const CodecConfig& config);

// Per-8x8-block orthonormal projection: three per-channel block means and one
// left/right contrast direction. The decoder is the transposed map.
class ReferenceCodec {
public:
    Latent encode(const Image& image) const;
    Image decode(const Latent& latent) const;  // clamped to [0,1]
    Tensor3 decode_unclamped(const Latent& latent) const;

    // Encoder as a stride-8 convolution kernel [4, 3, 8, 8], for use inside
    // differentiable graphs (e.g. as a perceptual feature extractor).
    static const ad::NdArray& encoder_kernel();
    // Basis vector `k` evaluated at block pixel (py, px), channel c.
    static double basis(int k, int py, int px, int c);
};

// Strided convolutional autoencoder fitted with mean-squared reconstruction loss.
class TrainableCodec {
public:
    explicit TrainableCodec(std::uint64_t seed);

    Latent encode(const Image& image) const;
    Image decode(const Latent& latent) const;

    ad::Var encode_graph(const ad::Var& image_chw) const;
    ad::Var decode_graph(const ad::Var& latent_chw) const;

    struct FitOptions {
        int steps = 1500;
        int batch = 4;
        double learning_rate = 4e-3;
        std::uint64_t seed = 0;
    };
    // Returns the per-step training loss.
    std::vector<double> fit(std::span<const Image> images, const FitOptions& options);

    nn::ParamList parameters() const;

private:
    nn::Conv2d enc1_, enc2_, enc3_;
    nn::Conv2d dec1_, dec2_, dec3_, dec4_;
};

// Codec selected by CodecConfig.
class LatentCodec {
public:
    explicit LatentCodec(const CodecConfig& config);

    Latent encode(const Image& image) const;
    Image decode(const Latent& latent) const;

    const CodecConfig& config() const { return config_; }
    TrainableCodec* trainable() { return trainable_.get(); }

private:
    CodecConfig config_;
    ReferenceCodec reference_;
    std::shared_ptr<TrainableCodec> trainable_;
};

Latent encode(const Image& image, const CodecConfig& config);
Image decode(const Latent& latent, const CodecConfig& config);

double mean_abs_error(const Image& a, const Image& b);

}  // namespace mgd::codec

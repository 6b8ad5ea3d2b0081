// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mgd/autodiff.hpp"
#include "mgd/conditioning.hpp"
#include "mgd/nn.hpp"
#include "mgd/tensor.hpp"

namespace mgd::denoiser {

// Sequence of `length` token vectors of dimension `dim`, row-major.
struct TextEmbedding {
    int length = 0;
    int dim = 0;
    std::vector<double> tokens;

    // Reserved embedding for the empty / dropped text condition.
    static TextEmbedding null(int dim);
    bool is_null() const;
    ad::NdArray as_array() const { return ad::NdArray({length, dim}, tokens); }

    friend bool operator==(const TextEmbedding&, const TextEmbedding&) = default;
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual TextEmbedding encode(const std::string& text) const = 0;
    virtual int dim() const = 0;
};

// Lowercase, collapse runs of whitespace, trim.
std::string normalize_text(const std::string& text);

// Hash-seeded pseudorandom unit vector per token plus mean-pooled and
// positional mixing. Deterministic, no external model.
class ToyTextEncoder : public TextEncoder {
public:
    explicit ToyTextEncoder(int dim = 64, int max_tokens = 16) : dim_(dim), max_tokens_(max_tokens) {}
    TextEmbedding encode(const std::string& text) const override;
    int dim() const override { return dim_; }

    static std::vector<double> token_vector(const std::string& token, int dim);

private:
    int dim_;
    int max_tokens_;
};

TextEmbedding encode_text(const std::string& text, const TextEncoder& embedder);

// Anything that predicts the noise in z_t from the spatial input.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    // gamma: [C, h, w] channel-first; returns [4, h, w].
    virtual ad::Var forward(const ad::Var& gamma, double t, const TextEmbedding& text) const = 0;
    Latent predict(const cond::SpatialInput& gamma, double t, const TextEmbedding& text) const;
};

struct DenoiserConfig {
    int in_channels = cond::SpatialInput::kFullChannels;
    int base_width = 32;
    int levels = 2;
    int time_dim = 32;
    int text_dim = 64;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static DenoiserConfig from_json(const std::string& text);

    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct InputConvWeights {
    ad::NdArray kernel;  // [out, in, k, k]
    ad::NdArray bias;    // [out]

    int in_channels() const { return kernel.dim(1); }
};

// Appends `n_new` input-channel slices drawn uniformly from [-b, b] with
// b = sqrt(6 / ((in + n_new) * k * k)). Existing slices and bias are copied.
InputConvWeights extend_input_kernels(const InputConvWeights& pretrained, int n_new, std::uint64_t seed);

std::vector<double> timestep_embedding(double t, int dim);

// Time- and text-conditional U-Net over the spatial input.
class UNet : public NoisePredictor {
public:
    explicit UNet(const DenoiserConfig& config);

    ad::Var forward(const ad::Var& gamma, double t, const TextEmbedding& text) const override;

    const DenoiserConfig& config() const { return config_; }
    nn::ParamList parameters() const;

    InputConvWeights input_conv() const;
    // Independent copy (no shared parameters).
    UNet clone() const;
    // Copy whose input layer gains `n_new` channels; every other weight is copied.
    UNet extend_input(int n_new, std::uint64_t seed) const;

    // Rescales every conv/linear weight so k*||W||_F (conv) or ||W||_F
    // (linear) is at most `limit`, bounding each layer's Lipschitz constant.
    void clamp_weights(double limit = 1.0);
    std::vector<std::pair<std::string, const nn::Conv2d*>> conv_layers() const;

    // Binary checkpoint: 8-byte magic, u64 config-JSON length, config JSON,
    // then every parameter as little-endian float32 in declaration order.
    std::string serialize() const;
    static UNet deserialize(const std::string& bytes);
    void save(const std::filesystem::path& path) const;
    static UNet load(const std::filesystem::path& path);

private:
    struct Level {
        nn::Conv2d conv_a, conv_b;
        nn::Linear time_proj;
        nn::CrossAttention attention;
        nn::Conv2d down;          // to the next level (absent on the last)
        nn::Conv2d up;            // from the next level
        nn::Conv2d merge;         // after skip concatenation
    };

    ad::Var residual_block(const Level& level, const ad::Var& x, const ad::Var& temb) const;

    DenoiserConfig config_;
    nn::Linear time_1_, time_2_;
    nn::Conv2d in_conv_;
    std::vector<Level> levels_;
    nn::Conv2d out_conv_;
};

}  // namespace mgd::denoiser

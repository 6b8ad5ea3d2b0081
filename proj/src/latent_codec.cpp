// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/latent_codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mgd/error.hpp"

namespace mgd::codec {

namespace {

void check_image_dims(const Image& image) {
    require(image.height() > 0 && image.width() > 0, "empty image");
    require(image.height() % kDownsample == 0 && image.width() % kDownsample == 0,
            "image dimensions must be divisible by 8, got " + image.shape_string());
}

Image clamp_to_image(Tensor3 t) {
    for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
    return Image(std::move(t));
}

}  // namespace

void validate(const CodecConfig& config) {
    if (config.latent_channels != Latent::kChannels) {
        throw ConfigError("codec latent_channels must be 4");
    }
}

double ReferenceCodec::basis(int k, int py, int px, int c) {
    (void)py;
    if (k < 3) {
        return c == k ? 1.0 / kDownsample : 0.0;
    }
    // Contrast: zero-mean within every channel, hence orthogonal to the means.
    static const double kContrast = 1.0 / std::sqrt(static_cast<double>(kDownsample * kDownsample * 3));
    return px < kDownsample / 2 ? kContrast : -kContrast;
}

const ad::NdArray& ReferenceCodec::encoder_kernel() {
    static const ad::NdArray kernel = [] {
        ad::NdArray k({Latent::kChannels, 3, kDownsample, kDownsample});
        for (int o = 0; o < Latent::kChannels; ++o) {
            for (int c = 0; c < 3; ++c) {
                for (int py = 0; py < kDownsample; ++py) {
                    for (int px = 0; px < kDownsample; ++px) {
                        k.data[((static_cast<std::size_t>(o) * 3 + c) * kDownsample + py) * kDownsample + px] =
                            basis(o, py, px, c);
                    }
                }
            }
        }
        return k;
    }();
    return kernel;
}

Latent ReferenceCodec::encode(const Image& image) const {
    check_image_dims(image);
    const int h = image.height() / kDownsample;
    const int w = image.width() / kDownsample;
    Latent out(h, w);
    for (int by = 0; by < h; ++by) {
        for (int bx = 0; bx < w; ++bx) {
            for (int k = 0; k < Latent::kChannels; ++k) {
                double acc = 0.0;
                for (int py = 0; py < kDownsample; ++py) {
                    for (int px = 0; px < kDownsample; ++px) {
                        for (int c = 0; c < 3; ++c) {
                            acc += basis(k, py, px, c) * image.at(by * kDownsample + py, bx * kDownsample + px, c);
                        }
                    }
                }
                out.at(by, bx, k) = acc;
            }
        }
    }
    return out;
}

Tensor3 ReferenceCodec::decode_unclamped(const Latent& latent) const {
    require(latent.channels() == Latent::kChannels, "latent must have 4 channels");
    Tensor3 out(latent.height() * kDownsample, latent.width() * kDownsample, 3);
    for (int by = 0; by < latent.height(); ++by) {
        for (int bx = 0; bx < latent.width(); ++bx) {
            for (int py = 0; py < kDownsample; ++py) {
                for (int px = 0; px < kDownsample; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        double acc = 0.0;
                        for (int k = 0; k < Latent::kChannels; ++k) acc += basis(k, py, px, c) * latent.at(by, bx, k);
                        out.at(by * kDownsample + py, bx * kDownsample + px, c) = acc;
                    }
                }
            }
        }
    }
    return out;
}

Image ReferenceCodec::decode(const Latent& latent) const { return clamp_to_image(decode_unclamped(latent)); }

TrainableCodec::TrainableCodec(std::uint64_t seed) {
    Rng rng(seed);
    enc1_ = nn::Conv2d(3, 32, 3, 2, 1, rng);
    enc2_ = nn::Conv2d(32, 64, 3, 2, 1, rng);
    enc3_ = nn::Conv2d(64, Latent::kChannels, 3, 2, 1, rng);
    dec1_ = nn::Conv2d(Latent::kChannels, 64, 3, 1, 1, rng);
    dec2_ = nn::Conv2d(64, 32, 3, 1, 1, rng);
    dec3_ = nn::Conv2d(32, 16, 3, 1, 1, rng);
    dec4_ = nn::Conv2d(16, 3, 3, 1, 1, rng);
    // Synthetic and catalogue images sit on white backgrounds.
    for (auto& b : dec4_.bias.mutable_value().data) b = 1.0;
}

ad::Var TrainableCodec::encode_graph(const ad::Var& x) const {
    return enc3_(ad::silu(enc2_(ad::silu(enc1_(x)))));
}

ad::Var TrainableCodec::decode_graph(const ad::Var& z) const {
    const int h = z.shape()[1], w = z.shape()[2];
    ad::Var x = ad::silu(dec1_(z));
    x = ad::silu(dec2_(ad::upsample2x(x, 2 * h, 2 * w)));
    x = ad::silu(dec3_(ad::upsample2x(x, 4 * h, 4 * w)));
    return dec4_(ad::upsample2x(x, 8 * h, 8 * w));
}

Latent TrainableCodec::encode(const Image& image) const {
    check_image_dims(image);
    return Latent(nn::from_chw(encode_graph(ad::constant(nn::to_chw(image))).value()));
}

Image TrainableCodec::decode(const Latent& latent) const {
    return clamp_to_image(nn::from_chw(decode_graph(ad::constant(nn::to_chw(latent))).value()));
}

std::vector<double> TrainableCodec::fit(std::span<const Image> images, const FitOptions& options) {
    require(!images.empty(), "cannot fit a codec on zero images");
    for (const auto& image : images) check_image_dims(image);
    std::vector<ad::NdArray> inputs;
    inputs.reserve(images.size());
    for (const auto& image : images) inputs.push_back(nn::to_chw(image));

    nn::Adam optimizer(parameters(), options.learning_rate);
    Rng rng(options.seed);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<double> losses;
    for (int step = 0; step < options.steps; ++step) {
        optimizer.zero_grad();
        double step_loss = 0.0;
        const int batch = std::min<int>(options.batch, static_cast<int>(images.size()));
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            const ad::Var target = ad::constant(inputs[order[cursor++]]);
            const ad::Var loss = ad::scale(ad::mse(decode_graph(encode_graph(target)), target), 1.0 / batch);
            ad::backward(loss);
            step_loss += loss.item();
        }
        // Cosine decay to 10% of the base rate.
        const double progress = static_cast<double>(step) / std::max(1, options.steps - 1);
        optimizer.set_learning_rate(options.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(M_PI * progress))));
        optimizer.step();
        losses.push_back(step_loss);
    }
    return losses;
}

nn::ParamList TrainableCodec::parameters() const {
    nn::ParamList out;
    enc1_.collect(out, "encoder.0");
    enc2_.collect(out, "encoder.1");
    enc3_.collect(out, "encoder.2");
    dec1_.collect(out, "decoder.0");
    dec2_.collect(out, "decoder.1");
    dec3_.collect(out, "decoder.2");
    dec4_.collect(out, "decoder.3");
    return out;
}

LatentCodec::LatentCodec(const CodecConfig& config) : config_(config) {
    validate(config);
    if (config.kind == CodecKind::trainable) {
        trainable_ = std::make_shared<TrainableCodec>(config.seed);
    }
}

Latent LatentCodec::encode(const Image& image) const {
    return trainable_ ? trainable_->encode(image) : reference_.encode(image);
}

Image LatentCodec::decode(const Latent& latent) const {
    return trainable_ ? trainable_->decode(latent) : reference_.decode(latent);
}

Latent encode(const Image& image, const CodecConfig& config) { return LatentCodec(config).encode(image); }

Image decode(const Latent& latent, const CodecConfig& config) { return LatentCodec(config).decode(latent); }

double mean_abs_error(const Image& a, const Image& b) {
    require(a.same_shape(b), "shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(a.data()[i] - b.data()[i]);
    return total / static_cast<double>(a.size());
}

}  // namespace mgd::codec

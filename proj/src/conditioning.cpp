// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/conditioning.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mgd/error.hpp"

namespace mgd::cond {

using nlohmann::json;

void Keypoints::validate(int height, int width) const {
    for (int k = 0; k < kNumKeypoints; ++k) {
        const auto& p = points_[static_cast<std::size_t>(k)];
        require(std::isfinite(p.x) && std::isfinite(p.y) && p.confidence >= 0.0 && p.confidence <= 1.0,
                "keypoint " + std::to_string(k) + " has non-finite coordinates or confidence outside [0,1]");
        if (p.confidence > 0.0) {
            require(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height,
                    "confident keypoint " + std::to_string(k) + " lies outside the image");
        }
    }
}

Keypoints keypoints_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("keypoints JSON: ") + e.what());
    }
    require(doc.is_array() && doc.size() == kNumKeypoints, "keypoints JSON must be an array of 18 triples");
    Keypoints kp;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const auto& t = doc[static_cast<std::size_t>(k)];
        require(t.is_array() && t.size() == 3 && t[0].is_number() && t[1].is_number() && t[2].is_number(),
                "keypoint " + std::to_string(k) + " must be [x, y, confidence]");
        kp[k] = Keypoint{t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
    }
    return kp;
}

std::string keypoints_to_json(const Keypoints& kp) {
    json doc = json::array();
    for (const auto& p : kp.points()) doc.push_back({p.x, p.y, p.confidence});
    return doc.dump();
}

PoseMap render_pose_map(const Keypoints& kp, int height, int width, double sigma) {
    require(sigma > 0.0, "pose map sigma must be positive");
    kp.validate(height, width);
    PoseMap out(height, width);
    const double denom = 2.0 * sigma * sigma;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const auto& p = kp[k];
        if (p.confidence <= 0.0) continue;
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const double dx = x - p.x, dy = y - p.y;
                out.at(y, x, k) = std::exp(-(dx * dx + dy * dy) / denom);
            }
        }
    }
    return out;
}

Image mask_image(const Image& image, const InpaintMask& mask) {
    require(image.height() == mask.height() && image.width() == mask.width(),
            "mask " + mask.shape_string() + " does not match image " + image.shape_string());
    Image out = image;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (mask.is_set(y, x)) {
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.0;
            }
        }
    }
    return out;
}

BinaryMask downsample_mask(const BinaryMask& mask, int factor) {
    require(factor > 0 && mask.height() % factor == 0 && mask.width() % factor == 0,
            "mask dimensions must be divisible by the downsampling factor");
    const int h = mask.height() / factor, w = mask.width() / factor;
    BinaryMask out(h, w);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.is_set(y, x)) out.at(y / factor, x / factor, 0) = 1.0;
        }
    }
    return out;
}

namespace {

// Normalized triangle-filter weights mapping n_in samples to n_in/factor.
std::vector<std::vector<std::pair<int, double>>> triangle_weights(int n_in, int factor) {
    const int n_out = n_in / factor;
    std::vector<std::vector<std::pair<int, double>>> weights(static_cast<std::size_t>(n_out));
    for (int i = 0; i < n_out; ++i) {
        const double center = (i + 0.5) * factor;
        double total = 0.0;
        auto& row = weights[static_cast<std::size_t>(i)];
        const int lo = std::max(0, static_cast<int>(std::floor(center - factor)));
        const int hi = std::min(n_in - 1, static_cast<int>(std::ceil(center + factor)));
        for (int j = lo; j <= hi; ++j) {
            const double wgt = 1.0 - std::abs(j + 0.5 - center) / factor;
            if (wgt > 0.0) {
                row.emplace_back(j, wgt);
                total += wgt;
            }
        }
        for (auto& [j, wgt] : row) wgt /= total;
    }
    return weights;
}

}  // namespace

Tensor3 resize_to_latent(const Tensor3& map, int factor) {
    require(factor > 0 && map.height() % factor == 0 && map.width() % factor == 0,
            "map dimensions must be divisible by 8, got " + map.shape_string());
    const auto wy = triangle_weights(map.height(), factor);
    const auto wx = triangle_weights(map.width(), factor);
    const int h = map.height() / factor, w = map.width() / factor, c = map.channels();

    Tensor3 rows(h, map.width(), c);
    for (int i = 0; i < h; ++i) {
        for (const auto& [j, wgt] : wy[static_cast<std::size_t>(i)]) {
            for (int x = 0; x < map.width(); ++x) {
                for (int ch = 0; ch < c; ++ch) rows.at(i, x, ch) += wgt * map.at(j, x, ch);
            }
        }
    }
    Tensor3 out(h, w, c);
    for (int i = 0; i < h; ++i) {
        for (int o = 0; o < w; ++o) {
            for (const auto& [j, wgt] : wx[static_cast<std::size_t>(o)]) {
                for (int ch = 0; ch < c; ++ch) out.at(i, o, ch) += wgt * rows.at(i, j, ch);
            }
        }
    }
    // Convex combinations of [0,1] values; clip rounding residue.
    for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

PoseMap resize_to_latent(const PoseMap& map) {
    return PoseMap(resize_to_latent(static_cast<const Tensor3&>(map), 8));
}

SketchImage resize_to_latent(const SketchImage& map) {
    return SketchImage(resize_to_latent(static_cast<const Tensor3&>(map), 8));
}

InpaintMask bounding_box_mask(const BinaryMask& mask) {
    int y0 = mask.height(), y1 = -1, x0 = mask.width(), x1 = -1;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.is_set(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
        }
    }
    InpaintMask out(mask.height(), mask.width());
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) out.at(y, x, 0) = 1.0;
    }
    return out;
}

SpatialInput::SpatialInput(Tensor3 t) : Tensor3(std::move(t)) {
    require(channels_ == kFullChannels || channels_ == kInpaintChannels,
            "spatial input must have 28 (or 9) channels, got " + shape_string());
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            const double m = at(y, x, kMaskOffset);
            require(m == 0.0 || m == 1.0, "spatial input mask channel must be binary");
        }
    }
}

Latent SpatialInput::noisy_latent() const { return Latent(slice_channels(kLatentOffset, 4)); }
BinaryMask SpatialInput::mask() const { return BinaryMask(slice_channels(kMaskOffset, 1)); }
Latent SpatialInput::masked_image_latent() const { return Latent(slice_channels(kMaskedImageOffset, 4)); }

PoseMap SpatialInput::pose() const {
    require(has_pose_and_sketch(), "spatial input has no pose channels");
    return PoseMap(slice_channels(kPoseOffset, kNumKeypoints));
}

SketchImage SpatialInput::sketch() const {
    require(has_pose_and_sketch(), "spatial input has no sketch channel");
    return SketchImage(slice_channels(kSketchOffset, 1));
}

void SpatialInput::set_noisy_latent(const Latent& z) {
    require(z.height() == height_ && z.width() == width_, "latent grid mismatch");
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            for (int c = 0; c < 4; ++c) at(y, x, kLatentOffset + c) = z.at(y, x, c);
        }
    }
}

void SpatialInput::zero_pose() {
    if (!has_pose_and_sketch()) return;
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            for (int c = 0; c < kNumKeypoints; ++c) at(y, x, kPoseOffset + c) = 0.0;
        }
    }
}

void SpatialInput::zero_sketch() {
    if (!has_pose_and_sketch()) return;
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) at(y, x, kSketchOffset) = 0.0;
    }
}

SpatialInput assemble_spatial_input(const Latent& z_t, const BinaryMask& m, const Latent& enc_masked,
                                    const PoseMap& p, const SketchImage& s) {
    const std::array<Tensor3, 5> parts{z_t, m, enc_masked, p, s};
    return SpatialInput(concat_channels(parts));
}

SpatialInput assemble_spatial_input(const Latent& z_t, const BinaryMask& m, const Latent& enc_masked) {
    const std::array<Tensor3, 3> parts{z_t, m, enc_masked};
    return SpatialInput(concat_channels(parts));
}

Image compose_output(const Image& generated, const Image& original, const HeadMask& head) {
    require(generated.same_shape(original), "generated " + generated.shape_string() +
                                                " and original " + original.shape_string() + " differ");
    require(head.height() == original.height() && head.width() == original.width(),
            "head mask " + head.shape_string() + " does not match image " + original.shape_string());
    Image out = generated;
    for (int y = 0; y < out.height(); ++y) {
        for (int x = 0; x < out.width(); ++x) {
            const double keep = head.at(y, x, 0);
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = keep * original.at(y, x, c) + (1.0 - keep) * generated.at(y, x, c);
            }
        }
    }
    return out;
}

}  // namespace mgd::cond

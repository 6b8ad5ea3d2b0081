// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>

#include "mgd/tensor.hpp"

namespace mgd::cond {

inline constexpr int kNumKeypoints = 18;

struct Keypoint {
    double x = 0.0;  // pixels
    double y = 0.0;  // pixels
    double confidence = 0.0;  // 0 marks an absent keypoint

    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

class Keypoints {
public:
    Keypoints() = default;
    explicit Keypoints(std::array<Keypoint, kNumKeypoints> points) : points_(points) {}

    Keypoint& operator[](int i) { return points_.at(static_cast<std::size_t>(i)); }
    const Keypoint& operator[](int i) const { return points_.at(static_cast<std::size_t>(i)); }
    const std::array<Keypoint, kNumKeypoints>& points() const { return points_; }

    // Confident keypoints must lie inside [0,W) x [0,H); confidences in [0,1].
    void validate(int height, int width) const;

    friend bool operator==(const Keypoints&, const Keypoints&) = default;

private:
    std::array<Keypoint, kNumKeypoints> points_{};
};

// JSON array of 18 [x, y, confidence] triples.
Keypoints keypoints_from_json(const std::string& text);
std::string keypoints_to_json(const Keypoints& kp);

// Channel k holds a unit-peak Gaussian at keypoint k, or zeros when absent.
PoseMap render_pose_map(const Keypoints& kp, int height, int width, double sigma = 4.0);

// Pixels under the mask set to 0.
Image mask_image(const Image& image, const InpaintMask& mask);

// Max-pool: a latent cell is set iff any pixel of its block is set.
BinaryMask downsample_mask(const BinaryMask& mask, int factor = 8);

// Antialiased bilinear (triangle filter) 8x downsampling.
Tensor3 resize_to_latent(const Tensor3& map, int factor = 8);
PoseMap resize_to_latent(const PoseMap& map);
SketchImage resize_to_latent(const SketchImage& map);

// Bounding box of the set pixels as a mask; empty input yields an empty mask.
InpaintMask bounding_box_mask(const BinaryMask& mask);

// Denoiser spatial input, channel layout [z_t(4); m(1); E(I_M)(4); p(18); s(1)].
// The 9-channel form (no pose/sketch) serves the text-only configuration.
class SpatialInput : public Tensor3 {
public:
    static constexpr int kLatentOffset = 0;
    static constexpr int kMaskOffset = 4;
    static constexpr int kMaskedImageOffset = 5;
    static constexpr int kPoseOffset = 9;
    static constexpr int kSketchOffset = 27;
    static constexpr int kInpaintChannels = 9;
    static constexpr int kFullChannels = 28;

    SpatialInput() = default;
    explicit SpatialInput(Tensor3 t);

    bool has_pose_and_sketch() const { return channels() == kFullChannels; }

    Latent noisy_latent() const;
    BinaryMask mask() const;
    Latent masked_image_latent() const;
    PoseMap pose() const;
    SketchImage sketch() const;

    void set_noisy_latent(const Latent& z);
    void zero_pose();
    void zero_sketch();
};

SpatialInput assemble_spatial_input(const Latent& z_t, const BinaryMask& m, const Latent& enc_masked,
                                    const PoseMap& p, const SketchImage& s);
SpatialInput assemble_spatial_input(const Latent& z_t, const BinaryMask& m, const Latent& enc_masked);

// M_head * original + (1 - M_head) * generated.
Image compose_output(const Image& generated, const Image& original, const HeadMask& head);

}  // namespace mgd::cond

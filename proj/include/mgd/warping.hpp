// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mgd/autodiff.hpp"
#include "mgd/metrics.hpp"
#include "mgd/nn.hpp"
#include "mgd/tensor.hpp"

namespace mgd::warp {

using Point = std::array<double, 2>;  // (x, y), normalized to [-1, 1]

// Source-to-target displacements of a grid x grid lattice of control points
// spanning [-1, 1]^2, row-major (y outer, x inner).
struct TPSParams {
    int grid = 5;
    std::vector<Point> theta;

    static TPSParams identity(int grid = 5);
    static TPSParams uniform(double dx, double dy, int grid = 5);
    void validate() const;
    std::vector<Point> sources() const;
    std::vector<Point> targets() const;
};

// Thin-plate spline through (source_i -> target_i) with U(r) = r^2 log r^2.
class ThinPlateSpline {
public:
    // Throws InputError when the system is singular (e.g. collinear points).
    ThinPlateSpline(std::span<const Point> sources, std::span<const Point> targets);
    Point operator()(const Point& p) const;

private:
    std::vector<Point> sources_;
    std::vector<Point> weights_;
    std::array<Point, 3> affine_;  // constant, x and y coefficients
};

// Pixel centre <-> normalized coordinates (align-corners off).
double to_normalized(double pixel, int size);
double to_pixel(double normalized, int size);

// Bilinear sample with border clamping; coordinates within 1e-9 of an integer
// snap to it, so integer shifts are exact.
double sample_bilinear(const Tensor3& image, double y, double x, int channel);

// Backward warp: each output pixel q samples the input at T^-1(q), where T^-1
// is the spline fitted from the displaced points back to the grid.
Tensor3 tps_transform(const Tensor3& image, const TPSParams& theta);
Image tps_transform(const Image& image, const TPSParams& theta);

// Mean of the displacements, in pixels (x, y).
Point mean_translation_px(const TPSParams& theta, int height, int width);

// Correlation-based TPS regressor: two small conv encoders, cosine
// correlation between every garment and person location, linear map to theta.
class TpsEstimator {
public:
    TpsEstimator(int height, int width, std::uint64_t seed, int grid = 5);

    // garment [3,H,W]; person = concat(pose map [18,H,W], masked person [3,H,W]).
    ad::Var forward(const ad::Var& garment, const ad::Var& person) const;
    ad::Var correlation(const ad::Var& garment, const ad::Var& person) const;  // [n, n]
    TPSParams estimate(const Image& garment, const PoseMap& pose, const Image& masked_person) const;

    struct Sample {
        Image garment;
        PoseMap pose;
        Image masked_person;
        TPSParams target;
    };
    // Adam on mean squared theta error; returns per-step losses.
    std::vector<double> fit(std::span<const Sample> samples, int steps, int batch, double learning_rate,
                            std::uint64_t seed);

    nn::ParamList parameters() const;
    int height() const { return height_; }
    int width() const { return width_; }

private:
    int height_, width_, grid_;
    nn::Conv2d g1_, g2_, p1_, p2_;
    nn::Linear regressor_;
};

// Garments: a rectangle at a canonical spot; person: the same rectangle
// shifted by up to `max_shift` px and blacked out (as mask_image does).
std::vector<TpsEstimator::Sample> translated_rectangles(int count, int height, int width, int max_shift,
                                                        std::uint64_t seed, int grid = 5);

// Residual U-Net over concat(coarse, pose, masked person); the last conv is
// zero-initialized so a fresh refiner returns the coarse warp unchanged.
class WarpRefiner {
public:
    WarpRefiner(std::uint64_t seed);

    ad::Var forward(const ad::Var& coarse, const ad::Var& pose, const ad::Var& masked_person) const;
    Image refine(const Image& coarse, const PoseMap& pose, const Image& masked_person) const;

    struct Sample {
        Image coarse;
        PoseMap pose;
        Image masked_person;
        Image target;
    };
    std::vector<double> fit(std::span<const Sample> samples, int steps, int batch, double learning_rate,
                            std::uint64_t seed);

    nn::ParamList parameters() const;

private:
    nn::Conv2d in_, down_, mid_, up_, merge_, out_;
};

// In-shop garments from the synthetic set as targets; coarse inputs are the
// same garments warped by random theta in [-jitter, jitter]; the masked person
// is the garment silhouette blacked out on white, with an empty pose map.
std::vector<WarpRefiner::Sample> jittered_garments(int count, int height, int width, double jitter,
                                                   std::uint64_t seed);

// Features for the perceptual term: the reference codec encoder as a fixed
// stride-8 convolution. Image sides must be multiples of 8.
ad::Var codec_features(const ad::Var& image);

// |a - b|_1 mean + weight * MSE(features(a), features(b)).
ad::Var refinement_loss(const ad::Var& output, const ad::Var& target, double perceptual_weight = 1.0);

// Edge map binarized at `threshold`.
SketchImage sketch_from_warp(const Image& warped, const metrics::EdgeExtractor& edges, double threshold = 0.05);

}  // namespace mgd::warp

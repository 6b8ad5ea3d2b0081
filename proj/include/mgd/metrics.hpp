// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "mgd/conditioning.hpp"
#include "mgd/tensor.hpp"

namespace mgd::metrics {

using FeatureSet = std::vector<std::vector<double>>;

class KeypointExtractor {
public:
    virtual ~KeypointExtractor() = default;
    virtual cond::Keypoints extract(const Image& image) const = 0;
};

class EdgeExtractor {
public:
    virtual ~EdgeExtractor() = default;
    // H x W x 1, values in [0,1].
    virtual Tensor3 edges(const Image& image) const = 0;
};

// Joint image/text embedding space (CLIP stand-in).
class EmbeddingExtractor {
public:
    virtual ~EmbeddingExtractor() = default;
    virtual std::vector<double> embed_image(const Image& image) const = 0;
    virtual std::vector<double> embed_text(const std::string& text) const = 0;
};

// Image features for FID/KID (Inception stand-in).
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<double> features(const Image& image) const = 0;
};

// Sobel gradient magnitude of luminance, replicate border, divided by the
// largest attainable magnitude (4*sqrt(2)).
class SobelEdges : public EdgeExtractor {
public:
    Tensor3 edges(const Image& image) const override;
};

// Finds the synthetic figure by exhaustive translation search against a
// rendered template; per-keypoint confidence is foreground coverage around
// the keypoint. Translation-equivariant within the search window.
class TemplateKeypoints : public KeypointExtractor {
public:
    cond::Keypoints extract(const Image& image) const override;
};

// Colour-bin embedding over the synthetic palette plus a stripe bin and a
// constant bin; text maps colour words and "striped" to the same bins.
class ToyClipEmbedder : public EmbeddingExtractor {
public:
    std::vector<double> embed_image(const Image& image) const override;
    std::vector<double> embed_text(const std::string& text) const override;
    static constexpr int kDim = 14;
};

// 4x4 grid of cell statistics: mean RGB and mean Sobel magnitude (64 dims).
class ToyInceptionFeatures : public FeatureExtractor {
public:
    std::vector<double> features(const Image& image) const override;
};

// Foreground = pixels whose largest channel distance from white exceeds 0.1.
bool is_foreground(const Image& image, int y, int x);

struct PoseDistance {
    double value = 0.0;
    double weight = 0.0;  // denominator (sum of CF)
    int pairs = 0;        // keypoint pairs with nonzero CF
    bool degenerate = false;
};

// Keypoint pairs count when the original keypoint falls inside `mask`.
// Binary CF (default): 1 if both confidences >= 0.5. Soft CF: product of the
// two confidences.
PoseDistance pose_distance(const cond::Keypoints& original, const cond::Keypoints& generated,
                           const InpaintMask& mask, bool soft = false);
PoseDistance pose_distance(const Image& original, const Image& generated, const InpaintMask& mask,
                           const KeypointExtractor& extractor, bool soft = false);

struct SketchDistance {
    double value = 0.0;
    int activated = 0;
    bool degenerate = false;
};

// MSE(a, b) * (H*W / |{a > 0.5} union {b > 0.5}|); 0 with the degenerate flag
// when nothing is activated.
SketchDistance sketch_distance_maps(const Tensor3& a, const Tensor3& b);
SketchDistance sketch_distance(const Image& original_seg, const Image& generated_seg, const EdgeExtractor& edges);

// Garment region of `image` on white: pixels outside `mask` become white.
Image segment_on_white(const Image& image, const BinaryMask& mask);

// Crops the bounding box of `mask` and pastes it, scaled to fit with aspect
// preserved (bilinear), centred on a white size x size canvas.
Image crop_to_canvas(const Image& image, const BinaryMask& mask, int size = 224);

// max(100 * cos(a, b), 0).
double clip_score(const std::vector<double>& image_embedding, const std::vector<double>& text_embedding);
double clip_score(const Image& generated, const InpaintMask& bbox_mask, const std::string& text,
                  const EmbeddingExtractor& embedder);

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance; needs at least two rows.
GaussianStats gaussian_stats(const FeatureSet& features);
// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with 1e-6 added to
// both diagonals.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);
// Unbiased MMD^2 with the kernel (x.y / d + 1)^3.
double kernel_distance(const FeatureSet& a, const FeatureSet& b);

struct MetricReport {
    double pd = 0.0;
    double sd = 0.0;
    double clip_s = 0.0;
    double fid = 0.0;
    double kid = 0.0;
    int samples = 0;
    int pd_degenerate = 0;
    int sd_degenerate = 0;
    std::string fingerprint;

    std::string to_json() const;  // NaN (too few samples for FID/KID) -> null
};

struct EvalItem {
    std::string id;
    std::string text;
    Image original;
    Image generated;
    InpaintMask mask;
};

struct Extractors {
    const KeypointExtractor& keypoints;
    const EdgeExtractor& edges;
    const EmbeddingExtractor& embedder;
    const FeatureExtractor& features;
};

struct EvalOptions {
    bool soft_pose_confidence = false;
};

// Per-item PD, SD and CLIP-S averaged over items (sorted by id); FID and KID
// between the original and generated sets.
MetricReport evaluate(std::vector<EvalItem> items, const Extractors& extractors, const EvalOptions& options = {});

}  // namespace mgd::metrics

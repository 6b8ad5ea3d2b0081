// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/metrics.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mgd/denoiser.hpp"
#include "mgd/error.hpp"
#include "mgd/synthetic.hpp"

namespace mgd::metrics {

namespace {

double luminance(const Image& img, int y, int x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

Tensor3 sobel_magnitude(const Image& image) {
    const int h = image.height(), w = image.width();
    Tensor3 out(h, w, 1);
    auto lum = [&](int y, int x) { return luminance(image, std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)); };
    static const double kMax = 4.0 * std::sqrt(2.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gx = (lum(y - 1, x + 1) + 2 * lum(y, x + 1) + lum(y + 1, x + 1)) -
                              (lum(y - 1, x - 1) + 2 * lum(y, x - 1) + lum(y + 1, x - 1));
            const double gy = (lum(y + 1, x - 1) + 2 * lum(y + 1, x) + lum(y + 1, x + 1)) -
                              (lum(y - 1, x - 1) + 2 * lum(y - 1, x) + lum(y - 1, x + 1));
            out.at(y, x, 0) = std::min(1.0, std::sqrt(gx * gx + gy * gy) / kMax);
        }
    }
    return out;
}

double color_distance(const Image& img, int y, int x, const std::array<double, 3>& rgb) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) d += (img.at(y, x, c) - rgb[static_cast<std::size_t>(c)]) * (img.at(y, x, c) - rgb[static_cast<std::size_t>(c)]);
    return std::sqrt(d);
}

// Colours of the synthetic figure itself, ignored by the toy embedder.
constexpr std::array<double, 3> kSkin{0.92, 0.76, 0.62};
constexpr std::array<double, 3> kHair{0.25, 0.15, 0.08};

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

bool is_foreground(const Image& image, int y, int x) {
    return std::max({1.0 - image.at(y, x, 0), 1.0 - image.at(y, x, 1), 1.0 - image.at(y, x, 2)}) > 0.1;
}

Tensor3 SobelEdges::edges(const Image& image) const { return sobel_magnitude(image); }

cond::Keypoints TemplateKeypoints::extract(const Image& image) const {
    const int h = image.height(), w = image.width();
    cond::Keypoints base;
    const Image figure = synthetic::render_figure(h, w, w / 2.0, 0.0, &base);

    std::vector<std::pair<int, int>> template_px;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (is_foreground(figure, y, x)) template_px.emplace_back(y, x);
        }
    }
    std::vector<unsigned char> fg(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) fg[static_cast<std::size_t>(y) * w + x] = is_foreground(image, y, x);
    }
    auto overlap = [&](int sy, int sx) {
        long n = 0;
        for (const auto& [y, x] : template_px) {
            const int yy = y + sy, xx = x + sx;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w) n += fg[static_cast<std::size_t>(yy) * w + xx];
        }
        return n;
    };
    // Coarse grid, then a full-resolution refinement around the best cell.
    // Ties go to the smaller shift, then to the scan order.
    const int ry = h / 4, rx = w / 4;
    const int stride = std::max(1, w / 48);
    auto better = [](long n, int sy, int sx, long best, int by, int bx) {
        if (n != best) return n > best;
        return std::abs(sy) + std::abs(sx) < std::abs(by) + std::abs(bx);
    };
    long best = -1;
    int by = 0, bx = 0;
    for (int sy = -ry; sy <= ry; sy += stride) {
        for (int sx = -rx; sx <= rx; sx += stride) {
            const long n = overlap(sy, sx);
            if (better(n, sy, sx, best, by, bx)) best = n, by = sy, bx = sx;
        }
    }
    if (stride > 1) {
        const int cy = by, cx = bx;
        for (int sy = std::max(-ry, cy - stride); sy <= std::min(ry, cy + stride); ++sy) {
            for (int sx = std::max(-rx, cx - stride); sx <= std::min(rx, cx + stride); ++sx) {
                const long n = overlap(sy, sx);
                if (better(n, sy, sx, best, by, bx)) best = n, by = sy, bx = sx;
            }
        }
    }

    const int r = std::max(1, w / 48);
    cond::Keypoints out;
    for (int k = 0; k < cond::kNumKeypoints; ++k) {
        const double x = base[k].x + bx, y = base[k].y + by;
        if (x < 0 || y < 0 || x >= w || y >= h) {
            out[k] = cond::Keypoint{std::clamp(x, 0.0, w - 1.0), std::clamp(y, 0.0, h - 1.0), 0.0};
            continue;
        }
        const int iy = static_cast<int>(y), ix = static_cast<int>(x);
        int total = 0, hit = 0;
        for (int yy = iy - r; yy <= iy + r; ++yy) {
            for (int xx = ix - r; xx <= ix + r; ++xx) {
                ++total;
                if (yy >= 0 && yy < h && xx >= 0 && xx < w) hit += fg[static_cast<std::size_t>(yy) * w + xx];
            }
        }
        out[k] = cond::Keypoint{x, y, static_cast<double>(hit) / total};
    }
    return out;
}

std::vector<double> ToyClipEmbedder::embed_image(const Image& image) const {
    const auto& colors = synthetic::palette();
    const std::size_t n = colors.size();
    std::vector<double> counts(kDim, 0.0);
    double light = 0.0, total = 0.0;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (!is_foreground(image, y, x)) continue;
            if (color_distance(image, y, x, kSkin) < 0.12 || color_distance(image, y, x, kHair) < 0.12) continue;
            // Nearest of the palette colours and their light (stripe) variants.
            double best = std::numeric_limits<double>::max();
            std::size_t best_i = 0;
            bool best_light = false;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& c = colors[i].rgb;
                const std::array<double, 3> lc{0.5 + 0.5 * c[0], 0.5 + 0.5 * c[1], 0.5 + 0.5 * c[2]};
                for (bool is_light : {false, true}) {
                    const double d = color_distance(image, y, x, is_light ? lc : c);
                    if (d < best) best = d, best_i = i, best_light = is_light;
                }
            }
            counts[best_i] += 1.0;
            light += best_light;
            total += 1.0;
        }
    }
    if (total > 0.0) {
        for (std::size_t i = 0; i < n; ++i) counts[i] /= total;
        counts[n] = std::min(1.0, 2.0 * light / total);
    }
    counts[n + 1] = 1.0;
    return counts;
}

std::vector<double> ToyClipEmbedder::embed_text(const std::string& text) const {
    const auto& colors = synthetic::palette();
    const std::size_t n = colors.size();
    std::vector<double> v(kDim, 0.0);
    std::istringstream in(denoiser::normalize_text(text));
    for (std::string word; in >> word;) {
        for (std::size_t i = 0; i < n; ++i) {
            if (word == colors[i].name) v[i] = 1.0;
        }
        if (word == "striped" || word == "stripes" || word == "stripe") v[n] = 1.0;
    }
    v[n + 1] = 1.0;
    return v;
}

std::vector<double> ToyInceptionFeatures::features(const Image& image) const {
    const int h = image.height(), w = image.width();
    const Tensor3 edges = sobel_magnitude(image);
    std::vector<double> out(64, 0.0);
    std::vector<double> counts(16, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t cell = static_cast<std::size_t>((y * 4 / h) * 4 + (x * 4 / w));
            for (int c = 0; c < 3; ++c) out[cell * 4 + static_cast<std::size_t>(c)] += image.at(y, x, c);
            out[cell * 4 + 3] += edges.at(y, x, 0);
            counts[cell] += 1.0;
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= std::max(1.0, counts[i / 4]);
    return out;
}

PoseDistance pose_distance(const cond::Keypoints& original, const cond::Keypoints& generated,
                           const InpaintMask& mask, bool soft) {
    PoseDistance out;
    double num = 0.0;
    for (int k = 0; k < cond::kNumKeypoints; ++k) {
        const auto& a = original[k];
        const auto& b = generated[k];
        const int iy = static_cast<int>(std::floor(a.y)), ix = static_cast<int>(std::floor(a.x));
        if (iy < 0 || ix < 0 || iy >= mask.height() || ix >= mask.width() || !mask.is_set(iy, ix)) continue;
        const double cf = soft ? a.confidence * b.confidence : (a.confidence >= 0.5 && b.confidence >= 0.5 ? 1.0 : 0.0);
        if (cf <= 0.0) continue;
        num += std::hypot(a.x - b.x, a.y - b.y) * cf;
        out.weight += cf;
        ++out.pairs;
    }
    if (out.weight > 0.0) {
        out.value = num / out.weight;
    } else {
        out.degenerate = true;
    }
    return out;
}

PoseDistance pose_distance(const Image& original, const Image& generated, const InpaintMask& mask,
                           const KeypointExtractor& extractor, bool soft) {
    require(original.same_shape(generated), "original " + original.shape_string() + " and generated " +
                                                generated.shape_string() + " differ");
    require(mask.height() == original.height() && mask.width() == original.width(), "mask does not match the images");
    return pose_distance(extractor.extract(original), extractor.extract(generated), mask, soft);
}

SketchDistance sketch_distance_maps(const Tensor3& a, const Tensor3& b) {
    require(a.same_shape(b) && a.channels() == 1, "edge maps must be single-channel and equally sized");
    SketchDistance out;
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        se += d * d;
        out.activated += (a.data()[i] > 0.5 || b.data()[i] > 0.5);
    }
    if (out.activated == 0) {
        out.degenerate = true;
        return out;
    }
    const double n = static_cast<double>(a.size());
    out.value = (se / n) * (n / out.activated);
    return out;
}

SketchDistance sketch_distance(const Image& original_seg, const Image& generated_seg, const EdgeExtractor& edges) {
    require(original_seg.same_shape(generated_seg), "segmented images differ in size");
    return sketch_distance_maps(edges.edges(original_seg), edges.edges(generated_seg));
}

Image segment_on_white(const Image& image, const BinaryMask& mask) {
    require(mask.height() == image.height() && mask.width() == image.width(), "mask does not match the image");
    Image out = image;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (!mask.is_set(y, x)) {
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = 1.0;
            }
        }
    }
    return out;
}

Image crop_to_canvas(const Image& image, const BinaryMask& mask, int size) {
    require(mask.height() == image.height() && mask.width() == image.width(), "mask does not match the image");
    int y0 = image.height(), y1 = -1, x0 = image.width(), x1 = -1;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (mask.is_set(y, x)) {
                y0 = std::min(y0, y), y1 = std::max(y1, y);
                x0 = std::min(x0, x), x1 = std::max(x1, x);
            }
        }
    }
    require(y1 >= 0, "CLIP-S needs a nonempty mask");
    const int bh = y1 - y0 + 1, bw = x1 - x0 + 1;
    const double scale = std::min(static_cast<double>(size) / bh, static_cast<double>(size) / bw);
    const int nh = std::clamp(static_cast<int>(std::lround(bh * scale)), 1, size);
    const int nw = std::clamp(static_cast<int>(std::lround(bw * scale)), 1, size);
    const int oy = (size - nh) / 2, ox = (size - nw) / 2;

    Image canvas(size, size, 1.0);
    for (int y = 0; y < nh; ++y) {
        const double sy = std::clamp((y + 0.5) / scale - 0.5, 0.0, bh - 1.0);
        const int ya = static_cast<int>(sy), yb = std::min(ya + 1, bh - 1);
        const double fy = sy - ya;
        for (int x = 0; x < nw; ++x) {
            const double sx = std::clamp((x + 0.5) / scale - 0.5, 0.0, bw - 1.0);
            const int xa = static_cast<int>(sx), xb = std::min(xa + 1, bw - 1);
            const double fx = sx - xa;
            for (int c = 0; c < 3; ++c) {
                const double top = (1 - fx) * image.at(y0 + ya, x0 + xa, c) + fx * image.at(y0 + ya, x0 + xb, c);
                const double bot = (1 - fx) * image.at(y0 + yb, x0 + xa, c) + fx * image.at(y0 + yb, x0 + xb, c);
                canvas.at(oy + y, ox + x, c) = std::clamp((1 - fy) * top + fy * bot, 0.0, 1.0);
            }
        }
    }
    return canvas;
}

double clip_score(const std::vector<double>& image_embedding, const std::vector<double>& text_embedding) {
    require(image_embedding.size() == text_embedding.size() && !image_embedding.empty(),
            "embeddings must share a nonzero dimension");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < image_embedding.size(); ++i) {
        dot += image_embedding[i] * text_embedding[i];
        na += image_embedding[i] * image_embedding[i];
        nb += text_embedding[i] * text_embedding[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(100.0 * dot / std::sqrt(na * nb), 0.0, 100.0);
}

double clip_score(const Image& generated, const InpaintMask& bbox_mask, const std::string& text,
                  const EmbeddingExtractor& embedder) {
    return clip_score(embedder.embed_image(crop_to_canvas(generated, bbox_mask)), embedder.embed_text(text));
}

GaussianStats gaussian_stats(const FeatureSet& features) {
    require(features.size() >= 2, "covariance needs at least two samples");
    const auto n = static_cast<Eigen::Index>(features.size());
    const auto d = static_cast<Eigen::Index>(features.front().size());
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        require(static_cast<Eigen::Index>(features[static_cast<std::size_t>(i)].size()) == d, "ragged feature set");
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    GaussianStats s;
    s.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
    s.cov = centered.transpose() * centered / static_cast<double>(n - 1);
    return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    require(a.mean.size() == b.mean.size() && a.cov.rows() == a.mean.size() && b.cov.rows() == b.mean.size(),
            "Gaussian statistics differ in dimension");
    const auto d = a.mean.size();
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd sa = a.cov + 1e-6 * eye, sb = b.cov + 1e-6 * eye;
    // tr((Sa Sb)^{1/2}) = tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}); the latter is symmetric.
    const Eigen::MatrixXd ra = psd_sqrt(sa);
    const Eigen::MatrixXd m = ra * sb * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const double tr_covmean = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fid = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_covmean;
    return std::max(0.0, fid);
}

double kernel_distance(const FeatureSet& a, const FeatureSet& b) {
    require(a.size() >= 2 && b.size() >= 2, "KID needs at least two samples per side");
    const std::size_t d = a.front().size();
    auto k = [d](const std::vector<double>& x, const std::vector<double>& y) {
        require(x.size() == d && y.size() == d, "ragged feature set");
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += x[i] * y[i];
        const double v = dot / static_cast<double>(d) + 1.0;
        return v * v * v;
    };
    auto within = [&](const FeatureSet& s) {
        double sum = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            for (std::size_t j = 0; j < s.size(); ++j) {
                if (i != j) sum += k(s[i], s[j]);
            }
        }
        return sum / (static_cast<double>(s.size()) * (s.size() - 1));
    };
    double cross = 0.0;
    for (const auto& x : a) {
        for (const auto& y : b) cross += k(x, y);
    }
    return within(a) + within(b) - 2.0 * cross / (static_cast<double>(a.size()) * b.size());
}

std::string MetricReport::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return nlohmann::json{{"pd", num(pd)},
                          {"sd", num(sd)},
                          {"clip_s", num(clip_s)},
                          {"fid", num(fid)},
                          {"kid", num(kid)},
                          {"samples", samples},
                          {"pd_degenerate", pd_degenerate},
                          {"sd_degenerate", sd_degenerate},
                          {"fingerprint", fingerprint}}
        .dump(2);
}

MetricReport evaluate(std::vector<EvalItem> items, const Extractors& ex, const EvalOptions& options) {
    std::sort(items.begin(), items.end(), [](const EvalItem& a, const EvalItem& b) { return a.id < b.id; });
    MetricReport report;
    report.samples = static_cast<int>(items.size());
    report.fingerprint = std::string("pd=") + (options.soft_pose_confidence ? "soft" : "binary") +
                         ";sd=union>0.5;clip=224-white;fid-reg=1e-6;kid=poly3";
    double pd_sum = 0.0, sd_sum = 0.0, clip_sum = 0.0;
    int pd_n = 0, sd_n = 0;
    FeatureSet real, fake;
    for (const auto& item : items) {
        require(item.original.same_shape(item.generated), "item " + item.id + ": original and generated differ in size");
        const auto pd = pose_distance(item.original, item.generated, item.mask, ex.keypoints, options.soft_pose_confidence);
        if (pd.degenerate) {
            ++report.pd_degenerate;
        } else {
            pd_sum += pd.value;
            ++pd_n;
        }
        const auto sd = sketch_distance(segment_on_white(item.original, item.mask),
                                        segment_on_white(item.generated, item.mask), ex.edges);
        if (sd.degenerate) {
            ++report.sd_degenerate;
        } else {
            sd_sum += sd.value;
            ++sd_n;
        }
        clip_sum += clip_score(item.generated, cond::bounding_box_mask(item.mask), item.text, ex.embedder);
        real.push_back(ex.features.features(item.original));
        fake.push_back(ex.features.features(item.generated));
    }
    report.pd = pd_n > 0 ? pd_sum / pd_n : 0.0;
    report.sd = sd_n > 0 ? sd_sum / sd_n : 0.0;
    report.clip_s = items.empty() ? 0.0 : clip_sum / static_cast<double>(items.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    report.fid = items.size() >= 2 ? frechet_distance(gaussian_stats(real), gaussian_stats(fake)) : nan;
    report.kid = items.size() >= 2 ? kernel_distance(real, fake) : nan;
    return report;
}

}  // namespace mgd::metrics

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/warping.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "mgd/error.hpp"
#include "mgd/latent_codec.hpp"
#include "mgd/rng.hpp"
#include "mgd/synthetic.hpp"

namespace mgd::warp {

namespace {

constexpr double kRegularizer = 1e-8;

double rbf(double dx, double dy) {
    const double r2 = dx * dx + dy * dy;
    return r2 > 0.0 ? r2 * std::log(r2) : 0.0;
}

double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
}

ad::NdArray concat_chw(std::initializer_list<const Tensor3*> parts) {
    std::vector<ad::Var> vars;
    for (const Tensor3* p : parts) vars.push_back(ad::constant(nn::to_chw(*p)));
    return ad::concat(vars).value();
}

}  // namespace

TPSParams TPSParams::identity(int grid) { return TPSParams{grid, std::vector<Point>(static_cast<std::size_t>(grid * grid), Point{0.0, 0.0})}; }

TPSParams TPSParams::uniform(double dx, double dy, int grid) {
    return TPSParams{grid, std::vector<Point>(static_cast<std::size_t>(grid * grid), Point{dx, dy})};
}

void TPSParams::validate() const {
    require(grid >= 3, "TPS grid must be at least 3x3");
    require(theta.size() == static_cast<std::size_t>(grid * grid), "TPS theta must hold grid*grid displacements");
    for (const auto& d : theta) require(std::isfinite(d[0]) && std::isfinite(d[1]), "TPS theta must be finite");
}

std::vector<Point> TPSParams::sources() const {
    std::vector<Point> out;
    out.reserve(static_cast<std::size_t>(grid * grid));
    for (int j = 0; j < grid; ++j) {
        for (int i = 0; i < grid; ++i) out.push_back({-1.0 + 2.0 * i / (grid - 1), -1.0 + 2.0 * j / (grid - 1)});
    }
    return out;
}

std::vector<Point> TPSParams::targets() const {
    auto out = sources();
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k][0] += theta[k][0];
        out[k][1] += theta[k][1];
    }
    return out;
}

ThinPlateSpline::ThinPlateSpline(std::span<const Point> sources, std::span<const Point> targets)
    : sources_(sources.begin(), sources.end()) {
    require(sources.size() == targets.size() && sources.size() >= 3, "TPS needs matching point sets of size >= 3");
    const auto n = static_cast<Eigen::Index>(sources.size());
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n + 3, n + 3);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& pi = sources[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& pj = sources[static_cast<std::size_t>(j)];
            l(i, j) = rbf(pi[0] - pj[0], pi[1] - pj[1]);
        }
        l(i, i) += kRegularizer;
        l(i, n) = l(n, i) = 1.0;
        l(i, n + 1) = l(n + 1, i) = pi[0];
        l(i, n + 2) = l(n + 2, i) = pi[1];
        rhs(i, 0) = targets[static_cast<std::size_t>(i)][0];
        rhs(i, 1) = targets[static_cast<std::size_t>(i)][1];
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(l);
    if (lu.rank() < n + 3) throw InputError("rejected TPS parameters: singular control-point system");
    const Eigen::MatrixXd sol = lu.solve(rhs);
    if (!sol.allFinite()) throw InputError("rejected TPS parameters: non-finite solution");
    weights_.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) weights_[static_cast<std::size_t>(i)] = {sol(i, 0), sol(i, 1)};
    for (int k = 0; k < 3; ++k) affine_[static_cast<std::size_t>(k)] = {sol(n + k, 0), sol(n + k, 1)};
}

Point ThinPlateSpline::operator()(const Point& p) const {
    Point out{affine_[0][0] + affine_[1][0] * p[0] + affine_[2][0] * p[1],
              affine_[0][1] + affine_[1][1] * p[0] + affine_[2][1] * p[1]};
    for (std::size_t i = 0; i < sources_.size(); ++i) {
        const double u = rbf(p[0] - sources_[i][0], p[1] - sources_[i][1]);
        out[0] += weights_[i][0] * u;
        out[1] += weights_[i][1] * u;
    }
    return out;
}

double to_normalized(double pixel, int size) { return (pixel + 0.5) * 2.0 / size - 1.0; }
double to_pixel(double normalized, int size) { return (normalized + 1.0) * size / 2.0 - 0.5; }

double sample_bilinear(const Tensor3& image, double y, double x, int channel) {
    y = std::clamp(snap(y), 0.0, image.height() - 1.0);
    x = std::clamp(snap(x), 0.0, image.width() - 1.0);
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, image.height() - 1), x1 = std::min(x0 + 1, image.width() - 1);
    const double fy = y - y0, fx = x - x0;
    if (fy == 0.0 && fx == 0.0) return image.at(y0, x0, channel);
    return (1 - fy) * ((1 - fx) * image.at(y0, x0, channel) + fx * image.at(y0, x1, channel)) +
           fy * ((1 - fx) * image.at(y1, x0, channel) + fx * image.at(y1, x1, channel));
}

Tensor3 tps_transform(const Tensor3& image, const TPSParams& theta) {
    theta.validate();
    const auto src = theta.sources();
    const auto dst = theta.targets();
    const ThinPlateSpline backward(dst, src);
    const int h = image.height(), w = image.width();
    Tensor3 out(h, w, image.channels());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Point s = backward({to_normalized(x, w), to_normalized(y, h)});
            const double sy = to_pixel(s[1], h), sx = to_pixel(s[0], w);
            for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = sample_bilinear(image, sy, sx, c);
        }
    }
    return out;
}

Image tps_transform(const Image& image, const TPSParams& theta) {
    return Image(tps_transform(static_cast<const Tensor3&>(image), theta));
}

Point mean_translation_px(const TPSParams& theta, int height, int width) {
    Point sum{0.0, 0.0};
    for (const auto& d : theta.theta) {
        sum[0] += d[0];
        sum[1] += d[1];
    }
    const double n = static_cast<double>(theta.theta.size());
    return {sum[0] / n * width / 2.0, sum[1] / n * height / 2.0};
}

TpsEstimator::TpsEstimator(int height, int width, std::uint64_t seed, int grid)
    : height_(height), width_(width), grid_(grid) {
    require(height > 0 && width > 0 && grid >= 3, "estimator needs a positive size and a grid of at least 3");
    Rng rng(seed);
    g1_ = nn::Conv2d(3, 8, 3, 2, 1, rng);
    g2_ = nn::Conv2d(8, 8, 3, 2, 1, rng);
    p1_ = nn::Conv2d(PoseMap::kChannels + 3, 8, 3, 2, 1, rng);
    p2_ = nn::Conv2d(8, 8, 3, 2, 1, rng);
    const int fh = (height + 3) / 4, fw = (width + 3) / 4;
    const int n = fh * fw;
    regressor_ = nn::Linear(n * n, 2 * grid * grid, rng);
    // Zero output at initialization: the identity warp.
    for (auto& v : regressor_.weight.mutable_value().data) v = 0.0;
}

ad::Var TpsEstimator::correlation(const ad::Var& garment, const ad::Var& person) const {
    require(garment.shape()[1] == height_ && garment.shape()[2] == width_ && person.shape()[1] == height_ &&
                person.shape()[2] == width_,
            "estimator inputs must match its configured size");
    const ad::Var fg = g2_(ad::silu(g1_(garment)));
    const ad::Var fp = p2_(ad::silu(p1_(person)));
    const int c = fg.shape()[0], n = fg.shape()[1] * fg.shape()[2];
    const ad::Var a = ad::normalize_columns(ad::reshape(fg, {c, n}));
    const ad::Var b = ad::normalize_columns(ad::reshape(fp, {c, n}));
    return ad::matmul(ad::transpose(a), b);
}

ad::Var TpsEstimator::forward(const ad::Var& garment, const ad::Var& person) const {
    const ad::Var corr = correlation(garment, person);
    const int n = corr.shape()[0];
    // Scaled by 1/n so one Adam step moves the output by O(lr), not O(lr * n).
    return regressor_(ad::scale(ad::reshape(corr, {1, n * n}), 1.0 / n));
}

TPSParams TpsEstimator::estimate(const Image& garment, const PoseMap& pose, const Image& masked_person) const {
    const ad::Var out = forward(ad::constant(nn::to_chw(garment)), ad::constant(concat_chw({&pose, &masked_person})));
    TPSParams theta{grid_, {}};
    for (int k = 0; k < grid_ * grid_; ++k) {
        theta.theta.push_back({out.value().data[static_cast<std::size_t>(2 * k)],
                               out.value().data[static_cast<std::size_t>(2 * k + 1)]});
    }
    return theta;
}

std::vector<double> TpsEstimator::fit(std::span<const Sample> samples, int steps, int batch, double learning_rate,
                                      std::uint64_t seed) {
    require(!samples.empty(), "no estimator training samples");
    struct Prepared {
        ad::Var garment, person, target;
    };
    std::vector<Prepared> data;
    for (const auto& s : samples) {
        ad::NdArray target({1, 2 * grid_ * grid_});
        for (int k = 0; k < grid_ * grid_; ++k) {
            target.data[static_cast<std::size_t>(2 * k)] = s.target.theta[static_cast<std::size_t>(k)][0];
            target.data[static_cast<std::size_t>(2 * k + 1)] = s.target.theta[static_cast<std::size_t>(k)][1];
        }
        data.push_back({ad::constant(nn::to_chw(s.garment)), ad::constant(concat_chw({&s.pose, &s.masked_person})),
                        ad::constant(std::move(target))});
    }
    nn::Adam optimizer(parameters(), learning_rate);
    Rng rng(seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<double> losses;
    for (int step = 0; step < steps; ++step) {
        optimizer.zero_grad();
        ad::Var total;
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            const auto& d = data[order[cursor++]];
            const ad::Var loss = ad::mse(forward(d.garment, d.person), d.target);
            total = total.defined() ? ad::add(total, loss) : loss;
        }
        total = ad::scale(total, 1.0 / batch);
        ad::backward(total);
        optimizer.step();
        losses.push_back(total.item());
    }
    return losses;
}

nn::ParamList TpsEstimator::parameters() const {
    nn::ParamList out;
    g1_.collect(out, "garment.0");
    g2_.collect(out, "garment.1");
    p1_.collect(out, "person.0");
    p2_.collect(out, "person.1");
    regressor_.collect(out, "regressor");
    return out;
}

std::vector<TpsEstimator::Sample> translated_rectangles(int count, int height, int width, int max_shift,
                                                        std::uint64_t seed, int grid) {
    Rng rng(seed);
    const auto& colors = synthetic::palette();
    std::vector<TpsEstimator::Sample> out;
    for (int i = 0; i < count; ++i) {
        const int rh = rng.uniform_int(height / 4, height / 2), rw = rng.uniform_int(width / 4, width / 2);
        const int top = (height - rh) / 2, left = (width - rw) / 2;
        const auto& color = colors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(colors.size()) - 1))];
        const int dx = rng.uniform_int(-max_shift, max_shift), dy = rng.uniform_int(-max_shift, max_shift);
        TpsEstimator::Sample s;
        s.garment = synthetic::rectangle_image(height, width, top, left, rh, rw, color.rgb);
        s.pose = PoseMap(height, width);
        s.masked_person = synthetic::rectangle_image(height, width, top + dy, left + dx, rh, rw, {0.0, 0.0, 0.0});
        s.target = TPSParams::uniform(2.0 * dx / width, 2.0 * dy / height, grid);
        out.push_back(std::move(s));
    }
    return out;
}

WarpRefiner::WarpRefiner(std::uint64_t seed) {
    Rng rng(seed);
    in_ = nn::Conv2d(3 + PoseMap::kChannels + 3, 16, 3, 1, 1, rng);
    down_ = nn::Conv2d(16, 32, 3, 2, 1, rng);
    mid_ = nn::Conv2d(32, 32, 3, 1, 1, rng);
    up_ = nn::Conv2d(32, 16, 3, 1, 1, rng);
    merge_ = nn::Conv2d(32, 16, 3, 1, 1, rng);
    out_ = nn::Conv2d(16, 3, 3, 1, 1, rng);
    for (auto& v : out_.weight.mutable_value().data) v = 0.0;
}

ad::Var WarpRefiner::forward(const ad::Var& coarse, const ad::Var& pose, const ad::Var& masked_person) const {
    const int h = coarse.shape()[1], w = coarse.shape()[2];
    const ad::Var x = ad::silu(in_(ad::concat({coarse, pose, masked_person})));
    ad::Var d = ad::silu(mid_(ad::silu(down_(x))));
    const ad::Var u = ad::silu(up_(ad::upsample2x(d, h, w)));
    const ad::Var residual = out_(ad::silu(merge_(ad::concat({u, x}))));
    return ad::clamp(ad::add(coarse, residual), 0.0, 1.0);
}

Image WarpRefiner::refine(const Image& coarse, const PoseMap& pose, const Image& masked_person) const {
    require(coarse.height() == pose.height() && coarse.width() == pose.width() && coarse.same_shape(masked_person),
            "refiner inputs must share a size");
    const ad::Var out = forward(ad::constant(nn::to_chw(coarse)), ad::constant(nn::to_chw(pose)),
                                ad::constant(nn::to_chw(masked_person)));
    return Image(nn::from_chw(out.value()));
}

std::vector<double> WarpRefiner::fit(std::span<const Sample> samples, int steps, int batch, double learning_rate,
                                     std::uint64_t seed) {
    require(!samples.empty(), "no refiner training samples");
    struct Prepared {
        ad::Var coarse, pose, person, target;
    };
    std::vector<Prepared> data;
    for (const auto& s : samples) {
        data.push_back({ad::constant(nn::to_chw(s.coarse)), ad::constant(nn::to_chw(s.pose)),
                        ad::constant(nn::to_chw(s.masked_person)), ad::constant(nn::to_chw(s.target))});
    }
    nn::Adam optimizer(parameters(), learning_rate);
    Rng rng(seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<double> losses;
    for (int step = 0; step < steps; ++step) {
        optimizer.zero_grad();
        ad::Var total;
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            const auto& d = data[order[cursor++]];
            const ad::Var loss = refinement_loss(forward(d.coarse, d.pose, d.person), d.target);
            total = total.defined() ? ad::add(total, loss) : loss;
        }
        total = ad::scale(total, 1.0 / batch);
        ad::backward(total);
        optimizer.step();
        losses.push_back(total.item());
    }
    return losses;
}

nn::ParamList WarpRefiner::parameters() const {
    nn::ParamList out;
    in_.collect(out, "in");
    down_.collect(out, "down");
    mid_.collect(out, "mid");
    up_.collect(out, "up");
    merge_.collect(out, "merge");
    out_.collect(out, "out");
    return out;
}

std::vector<WarpRefiner::Sample> jittered_garments(int count, int height, int width, double jitter,
                                                   std::uint64_t seed) {
    require(jitter >= 0.0, "jitter must be non-negative");
    const auto garments = synthetic::make_garment_set(count, height, width, seed);
    Rng rng(seed ^ 0x5deece66dULL);
    std::vector<WarpRefiner::Sample> out;
    for (const auto& g : garments) {
        TPSParams theta = TPSParams::identity();
        for (auto& d : theta.theta) {
            d[0] = rng.uniform(-jitter, jitter);
            d[1] = rng.uniform(-jitter, jitter);
        }
        Image person(height, width, 1.0);
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                if (!metrics::is_foreground(g.garment, y, x)) continue;
                for (int c = 0; c < 3; ++c) person.at(y, x, c) = 0.0;
            }
        }
        out.push_back({tps_transform(g.garment, theta), PoseMap(height, width), std::move(person), g.garment});
    }
    return out;
}

ad::Var codec_features(const ad::Var& image) {
    static const ad::Var kernel = ad::constant(codec::ReferenceCodec::encoder_kernel());
    static const ad::Var bias = ad::constant(ad::NdArray({Latent::kChannels}, 0.0));
    require(image.shape()[1] % codec::kDownsample == 0 && image.shape()[2] % codec::kDownsample == 0,
            "perceptual features need sides divisible by 8");
    return ad::conv2d(image, kernel, bias, codec::kDownsample, 0);
}

ad::Var refinement_loss(const ad::Var& output, const ad::Var& target, double perceptual_weight) {
    return ad::add(ad::l1(output, target),
                   ad::scale(ad::mse(codec_features(output), codec_features(target)), perceptual_weight));
}

SketchImage sketch_from_warp(const Image& warped, const metrics::EdgeExtractor& edges, double threshold) {
    const Tensor3 e = edges.edges(warped);
    SketchImage out(warped.height(), warped.width());
    for (std::size_t i = 0; i < e.size(); ++i) out.data()[i] = e.data()[i] > threshold ? 1.0 : 0.0;
    return out;
}

}  // namespace mgd::warp

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mgd/error.hpp"
#include "mgd/rng.hpp"

namespace mgd::synthetic {

namespace {

constexpr std::array<double, 3> kSkin{0.92, 0.76, 0.62};
constexpr std::array<double, 3> kHair{0.25, 0.15, 0.08};

struct Pose {
    double cx, dy;
    double x(double fx, double w) const { return cx + fx * w; }
};

using Region = std::function<bool(double y, double x)>;

void paint(Image& img, BinaryMask* mask, const Region& inside, const std::function<std::array<double, 3>(int, int)>& color) {
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            if (!inside(y + 0.5, x + 0.5)) continue;
            const auto rgb = color(y, x);
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
            if (mask) mask->at(y, x, 0) = 1.0;
        }
    }
}

Region ellipse(double cy, double cx, double ry, double rx) {
    return [=](double y, double x) {
        const double u = (y - cy) / ry, v = (x - cx) / rx;
        return u * u + v * v <= 1.0;
    };
}

Region segment(double y0, double x0, double y1, double x1, double radius) {
    return [=](double y, double x) {
        const double vy = y1 - y0, vx = x1 - x0;
        const double len2 = vy * vy + vx * vx;
        const double t = len2 > 0 ? std::clamp(((y - y0) * vy + (x - x0) * vx) / len2, 0.0, 1.0) : 0.0;
        const double dy = y - (y0 + t * vy), dx = x - (x0 + t * vx);
        return dy * dy + dx * dx <= radius * radius;
    };
}

// Trapezoid spanning rows [top, bottom] with half-widths interpolated linearly.
Region trapezoid(double top, double bottom, double cx, double half_top, double half_bottom) {
    return [=](double y, double x) {
        if (y < top || y > bottom) return false;
        const double t = (y - top) / (bottom - top);
        return std::abs(x - cx) <= half_top + t * (half_bottom - half_top);
    };
}

Region unite(Region a, Region b) {
    return [a = std::move(a), b = std::move(b)](double y, double x) { return a(y, x) || b(y, x); };
}

struct GarmentShape {
    std::string category;
    std::string type;
    // Builds the garment region for a figure centred at (cx, dy).
    std::function<Region(const Pose&, double h, double w)> region;
};

const std::vector<GarmentShape>& garment_shapes() {
    static const std::vector<GarmentShape> shapes = {
        {"upper", "shirt",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.24 * h, p.dy + 0.57 * h, p.cx, 0.20 * w, 0.17 * w);
         }},
        {"upper", "sweater",
         [](const Pose& p, double h, double w) {
             return unite(trapezoid(p.dy + 0.24 * h, p.dy + 0.60 * h, p.cx, 0.21 * w, 0.19 * w),
                          unite(segment(p.dy + 0.27 * h, p.x(-0.18, w), p.dy + 0.55 * h, p.x(-0.26, w), 0.06 * w),
                                segment(p.dy + 0.27 * h, p.x(0.18, w), p.dy + 0.55 * h, p.x(0.26, w), 0.06 * w)));
         }},
        {"upper", "top",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.27 * h, p.dy + 0.50 * h, p.cx, 0.16 * w, 0.16 * w);
         }},
        {"lower", "skirt",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.53 * h, p.dy + 0.76 * h, p.cx, 0.14 * w, 0.24 * w);
         }},
        {"lower", "trousers",
         [](const Pose& p, double h, double w) {
             return unite(trapezoid(p.dy + 0.53 * h, p.dy + 0.62 * h, p.cx, 0.15 * w, 0.16 * w),
                          unite(segment(p.dy + 0.58 * h, p.x(-0.09, w), p.dy + 0.90 * h, p.x(-0.10, w), 0.07 * w),
                                segment(p.dy + 0.58 * h, p.x(0.09, w), p.dy + 0.90 * h, p.x(0.10, w), 0.07 * w)));
         }},
        {"lower", "shorts",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.53 * h, p.dy + 0.68 * h, p.cx, 0.15 * w, 0.20 * w);
         }},
        {"dresses", "dress",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.24 * h, p.dy + 0.80 * h, p.cx, 0.17 * w, 0.30 * w);
         }},
        {"dresses", "gown",
         [](const Pose& p, double h, double w) {
             return trapezoid(p.dy + 0.24 * h, p.dy + 0.92 * h, p.cx, 0.16 * w, 0.36 * w);
         }},
    };
    return shapes;
}

cond::Keypoints figure_keypoints(const Pose& p, double h, double w) {
    // OpenPose/COCO-18 order.
    const std::array<std::array<double, 2>, cond::kNumKeypoints> layout{{
        {0.00, 0.15},   // nose
        {0.00, 0.23},   // neck
        {-0.18, 0.26},  // right shoulder
        {-0.24, 0.42},  // right elbow
        {-0.26, 0.56},  // right wrist
        {0.18, 0.26},   // left shoulder
        {0.24, 0.42},   // left elbow
        {0.26, 0.56},   // left wrist
        {-0.10, 0.56},  // right hip
        {-0.10, 0.74},  // right knee
        {-0.10, 0.91},  // right ankle
        {0.10, 0.56},   // left hip
        {0.10, 0.74},   // left knee
        {0.10, 0.91},   // left ankle
        {-0.04, 0.12},  // right eye
        {0.04, 0.12},   // left eye
        {-0.09, 0.13},  // right ear
        {0.09, 0.13},   // left ear
    }};
    cond::Keypoints kp;
    for (int k = 0; k < cond::kNumKeypoints; ++k) {
        const auto& [fx, fy] = layout[static_cast<std::size_t>(k)];
        kp[k] = cond::Keypoint{std::clamp(p.x(fx, w), 0.0, w - 1.0), std::clamp(p.dy + fy * h, 0.0, h - 1.0), 1.0};
    }
    return kp;
}

void draw_body(Image& img, HeadMask& head, const Pose& p, double h, double w) {
    const auto skin = [](int, int) { return kSkin; };
    const auto kp = figure_keypoints(p, h, w);
    auto limb = [&](int a, int b, double r) {
        paint(img, nullptr, segment(kp[a].y, kp[a].x, kp[b].y, kp[b].x, r * w), skin);
    };
    limb(2, 3, 0.05);
    limb(3, 4, 0.045);
    limb(5, 6, 0.05);
    limb(6, 7, 0.045);
    limb(8, 9, 0.06);
    limb(9, 10, 0.055);
    limb(11, 12, 0.06);
    limb(12, 13, 0.055);
    paint(img, nullptr, trapezoid(p.dy + 0.24 * h, p.dy + 0.58 * h, p.cx, 0.18 * w, 0.14 * w), skin);
    paint(img, nullptr, segment(p.dy + 0.18 * h, p.cx, p.dy + 0.25 * h, p.cx, 0.05 * w), skin);
    paint(img, &head, ellipse(p.dy + 0.13 * h, p.cx, 0.085 * h, 0.11 * w), skin);
    paint(img, &head, ellipse(p.dy + 0.08 * h, p.cx, 0.045 * h, 0.11 * w), [](int, int) { return kHair; });
}

}  // namespace

Image render_figure(int height, int width, double cx, double dy, cond::Keypoints* keypoints) {
    require(height > 0 && width > 0, "figure needs a positive size");
    Image img(height, width, 1.0);
    HeadMask head(height, width);
    const Pose pose{cx, dy};
    draw_body(img, head, pose, height, width);
    if (keypoints) *keypoints = figure_keypoints(pose, height, width);
    return img;
}

const std::vector<NamedColor>& palette() {
    static const std::vector<NamedColor> colors = {
        {"red", {0.85, 0.10, 0.10}},    {"blue", {0.10, 0.20, 0.85}},  {"green", {0.10, 0.60, 0.20}},
        {"yellow", {0.95, 0.85, 0.10}}, {"black", {0.08, 0.08, 0.08}}, {"pink", {0.95, 0.50, 0.70}},
        {"orange", {0.95, 0.50, 0.10}}, {"purple", {0.50, 0.15, 0.60}}, {"gray", {0.50, 0.50, 0.50}},
        {"navy", {0.05, 0.08, 0.35}},   {"brown", {0.45, 0.25, 0.10}}, {"teal", {0.05, 0.50, 0.50}},
    };
    return colors;
}

SketchImage outline(const BinaryMask& region) {
    SketchImage out(region.height(), region.width());
    for (int y = 0; y < region.height(); ++y) {
        for (int x = 0; x < region.width(); ++x) {
            if (!region.is_set(y, x)) continue;
            const bool border = y == 0 || x == 0 || y == region.height() - 1 || x == region.width() - 1 ||
                                !region.is_set(y - 1, x) || !region.is_set(y + 1, x) ||
                                !region.is_set(y, x - 1) || !region.is_set(y, x + 1);
            if (border) out.at(y, x, 0) = 1.0;
        }
    }
    return out;
}

Image rectangle_image(int height, int width, int top, int left, int rect_h, int rect_w,
                      const std::array<double, 3>& rgb) {
    Image img(height, width, 1.0);
    for (int y = std::max(0, top); y < std::min(height, top + rect_h); ++y) {
        for (int x = std::max(0, left); x < std::min(width, left + rect_w); ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
        }
    }
    return img;
}

GarmentSample make_sample(int index, int height, int width, std::uint64_t seed) {
    require(height > 0 && width > 0, "synthetic sample needs a positive size");
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index) * 0xBF58476D1CE4E5B9ULL + 1);
    const double h = height, w = width;
    const auto& shapes = garment_shapes();
    const auto& shape = shapes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(shapes.size()) - 1))];
    const auto& colors = palette();
    const auto& color = colors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(colors.size()) - 1))];
    const bool striped = rng.uniform() < 0.3;
    const Pose pose{w / 2.0 + rng.uniform(-0.06, 0.06) * w, rng.uniform(-0.03, 0.03) * h};

    const std::array<double, 3> light{0.5 + 0.5 * color.rgb[0], 0.5 + 0.5 * color.rgb[1], 0.5 + 0.5 * color.rgb[2]};
    const auto garment_color = [&](int y, int) { return striped && (y / 3) % 2 == 1 ? light : color.rgb; };

    GarmentSample s;
    s.id = "item" + std::to_string(index);
    s.category = shape.category;
    s.text = std::string(color.name) + (striped ? " striped " : " ") + shape.type;
    static const char* const kExtras[] = {"", " with short sleeves", " made of cotton", " for summer", " in soft fabric"};
    s.caption = "a " + s.text + kExtras[rng.uniform_int(0, 4)];

    s.image = Image(height, width, 1.0);
    s.head_mask = HeadMask(height, width);
    draw_body(s.image, s.head_mask, pose, h, w);
    s.garment_mask = InpaintMask(height, width);
    paint(s.image, &s.garment_mask, shape.region(pose, h, w), garment_color);
    // Garment never overlaps the preserved face region.
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (s.garment_mask.is_set(y, x)) s.head_mask.at(y, x, 0) = 0.0;
        }
    }
    s.inpaint_mask = cond::bounding_box_mask(s.garment_mask);
    s.keypoints = figure_keypoints(pose, h, w);
    s.sketch = outline(s.garment_mask);

    s.garment = Image(height, width, 1.0);
    const Pose canonical{w / 2.0, 0.0};
    paint(s.garment, nullptr, shape.region(canonical, h, w), garment_color);
    return s;
}

std::vector<GarmentSample> make_garment_set(int count, int height, int width, std::uint64_t seed) {
    std::vector<GarmentSample> out;
    out.reserve(static_cast<std::size_t>(std::max(0, count)));
    for (int i = 0; i < count; ++i) out.push_back(make_sample(i, height, width, seed));
    return out;
}

}  // namespace mgd::synthetic

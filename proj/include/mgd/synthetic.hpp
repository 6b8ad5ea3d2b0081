// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural fashion figures: a person silhouette on white wearing one
// coloured garment, together with every conditioning signal the pipeline
// consumes. Used by the tests, the training command and the demos.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mgd/conditioning.hpp"
#include "mgd/tensor.hpp"

namespace mgd::synthetic {

struct NamedColor {
    const char* name;
    std::array<double, 3> rgb;
};

const std::vector<NamedColor>& palette();

struct GarmentSample {
    std::string id;
    std::string category;  // upper | lower | dresses
    std::string caption;   // free-text description
    std::string text;      // short noun chunk, e.g. "red striped shirt"
    Image image;           // model wearing the garment
    Image garment;         // in-shop garment centred on white
    InpaintMask garment_mask;  // exact garment pixels
    InpaintMask inpaint_mask;  // bounding box of garment_mask
    HeadMask head_mask;
    cond::Keypoints keypoints;
    SketchImage sketch;  // garment outline
};

// Deterministic for fixed (index, height, width, seed).
GarmentSample make_sample(int index, int height, int width, std::uint64_t seed);
std::vector<GarmentSample> make_garment_set(int count, int height, int width, std::uint64_t seed);

// Bare figure (no garment) centred at horizontal position `cx`, shifted down
// by `dy` pixels, with its 18 keypoints.
Image render_figure(int height, int width, double cx, double dy, cond::Keypoints* keypoints = nullptr);

// Outline of a binary region: set pixels with at least one unset 4-neighbour.
SketchImage outline(const BinaryMask& region);

// Solid rectangle of `rgb` on a white canvas.
Image rectangle_image(int height, int width, int top, int left, int rect_h, int rect_w,
                      const std::array<double, 3>& rgb);

}  // namespace mgd::synthetic

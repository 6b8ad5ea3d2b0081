// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Glue between pixel-space inputs and the latent diffusion model.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mgd/conditioning.hpp"
#include "mgd/denoiser.hpp"
#include "mgd/diffusion.hpp"
#include "mgd/latent_codec.hpp"
#include "mgd/synthetic.hpp"

namespace mgd::pipeline {

// Pixel-resolution inputs for one edit.
struct EditInputs {
    Image image;
    InpaintMask mask;
    HeadMask head_mask;
    cond::Keypoints keypoints;
    SketchImage sketch;
    std::string text;
};

EditInputs from_sample(const synthetic::GarmentSample& sample);

struct PipelineConfig {
    // Multiplies codec latents before diffusion so they sit near unit scale.
    double latent_scale = 0.125;
    double pose_sigma = 4.0;
};

class Pipeline {
public:
    Pipeline(const codec::LatentCodec& codec, const denoiser::TextEncoder& text_encoder,
             const PipelineConfig& config = {});

    diffusion::Example prepare(const EditInputs& inputs) const;
    std::vector<diffusion::Example> prepare(std::span<const EditInputs> inputs) const;

    Latent to_latent(const Image& image) const;
    Image to_image(const Latent& scaled) const;

    // Samples z_T ~ N(0, I) from `seed`, runs guided DDIM, decodes and pastes
    // the original head region back.
    Image generate(const denoiser::NoisePredictor& model, int in_channels, const EditInputs& inputs,
                   const diffusion::GuidanceSpec& guidance, const diffusion::NoiseSchedule& schedule,
                   std::uint64_t seed, const diffusion::StepObserver& observer = {}) const;

private:
    const codec::LatentCodec& codec_;
    const denoiser::TextEncoder& text_encoder_;
    PipelineConfig config_;
};

}  // namespace mgd::pipeline

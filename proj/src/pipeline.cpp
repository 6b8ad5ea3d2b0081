// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/pipeline.hpp"

#include "mgd/error.hpp"
#include "mgd/rng.hpp"

namespace mgd::pipeline {

EditInputs from_sample(const synthetic::GarmentSample& sample) {
    return EditInputs{sample.image, sample.inpaint_mask, sample.head_mask, sample.keypoints, sample.sketch, sample.text};
}

Pipeline::Pipeline(const codec::LatentCodec& codec, const denoiser::TextEncoder& text_encoder,
                   const PipelineConfig& config)
    : codec_(codec), text_encoder_(text_encoder), config_(config) {
    if (!(config.latent_scale > 0.0)) throw ConfigError("latent_scale must be positive");
}

Latent Pipeline::to_latent(const Image& image) const {
    Latent z = codec_.encode(image);
    for (auto& v : z.data()) v *= config_.latent_scale;
    return z;
}

Image Pipeline::to_image(const Latent& scaled) const {
    Latent z = scaled;
    for (auto& v : z.data()) v /= config_.latent_scale;
    return codec_.decode(z);
}

diffusion::Example Pipeline::prepare(const EditInputs& in) const {
    const int h = in.image.height(), w = in.image.width();
    require(in.mask.height() == h && in.mask.width() == w, "mask does not match the image");
    require(in.sketch.height() == h && in.sketch.width() == w, "sketch does not match the image");
    diffusion::Example ex;
    ex.target = to_latent(in.image);
    ex.task.mask = cond::downsample_mask(in.mask, codec::kDownsample);
    ex.task.masked_image = to_latent(cond::mask_image(in.image, in.mask));
    ex.conditions.text = text_encoder_.encode(in.text);
    ex.conditions.pose = cond::resize_to_latent(cond::render_pose_map(in.keypoints, h, w, config_.pose_sigma));
    ex.conditions.sketch = cond::resize_to_latent(in.sketch);
    return ex;
}

std::vector<diffusion::Example> Pipeline::prepare(std::span<const EditInputs> inputs) const {
    std::vector<diffusion::Example> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) out.push_back(prepare(in));
    return out;
}

Image Pipeline::generate(const denoiser::NoisePredictor& model, int in_channels, const EditInputs& inputs,
                         const diffusion::GuidanceSpec& guidance, const diffusion::NoiseSchedule& schedule,
                         std::uint64_t seed, const diffusion::StepObserver& observer) const {
    const diffusion::Example ex = prepare(inputs);
    Rng rng(seed);
    Latent z_T(ex.target.height(), ex.target.width());
    for (auto& v : z_T.data()) v = rng.normal();
    const Latent z0 = diffusion::ddim_sample(model, in_channels, z_T, ex.task, ex.conditions, guidance, schedule,
                                             observer);
    return cond::compose_output(to_image(z0), inputs.image, inputs.head_mask);
}

}  // namespace mgd::pipeline

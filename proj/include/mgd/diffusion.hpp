// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mgd/autodiff.hpp"
#include "mgd/conditioning.hpp"
#include "mgd/denoiser.hpp"
#include "mgd/rng.hpp"
#include "mgd/tensor.hpp"

namespace mgd::diffusion {

using denoiser::NoisePredictor;
using denoiser::TextEmbedding;

// Linear beta schedule; alpha_bar(0) == 1 by definition.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

    int T() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const;       // t in [1, T]
    double alpha_bar(int t) const;  // t in [0, T]

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;  // index t, alpha_bars_[0] = 1
};

Latent add_noise(const Latent& z0, const Latent& eps, int t, const NoiseSchedule& schedule);

// Guidance conditions at latent resolution. Null pose/sketch are all-zero
// maps; null text is the reserved null embedding.
struct ConditionSet {
    TextEmbedding text;
    PoseMap pose;
    SketchImage sketch;

    bool has_text() const { return !text.is_null(); }
    bool has_pose() const;
    bool has_sketch() const;
    ConditionSet nulled() const;
};

// Everything the denoiser sees besides z_t and the guidance conditions.
struct InpaintTask {
    BinaryMask mask;      // latent resolution
    Latent masked_image;  // encoded masked image
};

// One training item; `target` is the clean latent z0.
struct Example {
    Latent target;
    InpaintTask task;
    ConditionSet conditions;
};

cond::SpatialInput assemble(const Latent& z_t, const InpaintTask& task, const ConditionSet& conditions,
                            int in_channels);

struct GuidanceSpec {
    double alpha = 7.5;
    double sketch_fraction = 0.2;
    int steps = 50;

    void validate() const;
    // Number of leading (highest-t) iterations that see the sketch.
    int sketch_active_steps() const;
};

struct TrainingConfig {
    double p_uncond = 0.2;
    double learning_rate = 1e-3;
    int batch = 8;
    int steps = 500;
    std::uint64_t seed = 0;

    void validate() const;
};

// Each present condition is independently replaced by its null value with
// probability p_uncond. Exactly three Bernoulli draws per call.
ConditionSet mask_conditions(const ConditionSet& conditions, double p_uncond, Rng& rng);

// Mean over the batch of ||eps - eps_theta(gamma, t, text)||^2 / numel with
// t ~ U{1..T} and eps ~ N(0, I); draws t then eps per example.
ad::Var training_loss(std::span<const Example> batch, const NoisePredictor& model, int in_channels,
                      const NoiseSchedule& schedule, Rng& rng);

// eps(null) + alpha * (eps(all) - eps(null)) with exactly two forward calls.
// The null branch zeroes text, pose and sketch and keeps m and E(I_M).
Latent cfg_predict(const NoisePredictor& model, const cond::SpatialInput& gamma, const TextEmbedding& text,
                   double alpha, double t, double* guidance_norm = nullptr);

struct StepRecord {
    int step = 0;
    int t = 0;
    bool sketch_active = false;
    double guidance_norm = 0.0;
    const cond::SpatialInput* gamma = nullptr;  // valid during the callback only

    std::string to_json() const;  // {step, t, sketch_active, guidance_norm}
};
using StepObserver = std::function<void(const StepRecord&)>;

// DDIM timesteps t_i = round(T * (steps - i) / steps), i = 0..steps-1.
std::vector<int> ddim_timesteps(int steps, int T);

// Deterministic (eta = 0) DDIM from z_T down to t = 0.
Latent ddim_sample(const NoisePredictor& model, int in_channels, const Latent& z_T, const InpaintTask& task,
                   const ConditionSet& conditions, const GuidanceSpec& guidance, const NoiseSchedule& schedule,
                   const StepObserver& observer = {});

// Counts forward calls of the wrapped predictor.
class CountingPredictor : public NoisePredictor {
public:
    explicit CountingPredictor(const NoisePredictor& inner) : inner_(inner) {}
    ad::Var forward(const ad::Var& gamma, double t, const TextEmbedding& text) const override {
        ++calls_;
        return inner_.forward(gamma, t, text);
    }
    int calls() const { return calls_; }
    void reset() { calls_ = 0; }

private:
    const NoisePredictor& inner_;
    mutable std::atomic<int> calls_{0};
};

// Adam over the U-Net with per-step condition dropout. Batches are drawn
// from a seeded shuffle. The callback receives (step, loss).
std::vector<double> train(denoiser::UNet& model, std::span<const Example> examples, const TrainingConfig& config,
                          const NoiseSchedule& schedule,
                          const std::function<void(int, double)>& on_step = {});

}  // namespace mgd::diffusion

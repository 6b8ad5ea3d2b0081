// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/diffusion.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mgd/error.hpp"
#include "mgd/nn.hpp"

namespace mgd::diffusion {

namespace {

bool any_nonzero(const Tensor3& t) {
    return std::any_of(t.data().begin(), t.data().end(), [](double v) { return v != 0.0; });
}

Latent gaussian_like(int h, int w, Rng& rng) {
    Latent out(h, w);
    for (auto& v : out.data()) v = rng.normal();
    return out;
}

}  // namespace

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
        throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    betas_.resize(static_cast<std::size_t>(steps));
    alpha_bars_.assign(static_cast<std::size_t>(steps) + 1, 1.0);
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        betas_[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
        alpha_bars_[static_cast<std::size_t>(i) + 1] =
            alpha_bars_[static_cast<std::size_t>(i)] * (1.0 - betas_[static_cast<std::size_t>(i)]);
    }
}

double NoiseSchedule::beta(int t) const {
    require(t >= 1 && t <= T(), "timestep " + std::to_string(t) + " outside [1, T]");
    return betas_[static_cast<std::size_t>(t) - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    require(t >= 0 && t <= T(), "timestep " + std::to_string(t) + " outside [0, T]");
    return alpha_bars_[static_cast<std::size_t>(t)];
}

Latent add_noise(const Latent& z0, const Latent& eps, int t, const NoiseSchedule& schedule) {
    require(z0.same_shape(eps), "noise shape " + eps.shape_string() + " does not match " + z0.shape_string());
    const double ab = schedule.alpha_bar(t);
    if (t == 0) return z0;
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Latent out(z0.height(), z0.width());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a * z0.data()[i] + b * eps.data()[i];
    return out;
}

bool ConditionSet::has_pose() const { return any_nonzero(pose); }
bool ConditionSet::has_sketch() const { return any_nonzero(sketch); }

ConditionSet ConditionSet::nulled() const {
    return ConditionSet{TextEmbedding::null(text.dim), PoseMap(pose.height(), pose.width()),
                        SketchImage(sketch.height(), sketch.width())};
}

cond::SpatialInput assemble(const Latent& z_t, const InpaintTask& task, const ConditionSet& conditions,
                            int in_channels) {
    if (in_channels == cond::SpatialInput::kInpaintChannels) {
        return cond::assemble_spatial_input(z_t, task.mask, task.masked_image);
    }
    return cond::assemble_spatial_input(z_t, task.mask, task.masked_image, conditions.pose, conditions.sketch);
}

void GuidanceSpec::validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("guidance alpha must be >= 0");
    if (!(sketch_fraction >= 0.0 && sketch_fraction <= 1.0)) throw ConfigError("sketch_fraction must lie in [0,1]");
    if (steps < 1) throw ConfigError("sampling steps must be >= 1");
}

int GuidanceSpec::sketch_active_steps() const {
    // Tolerance keeps products like 0.2 * 50 from landing one step high.
    const double raw = sketch_fraction * steps;
    return static_cast<int>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

void TrainingConfig::validate() const {
    if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ConfigError("p_uncond must lie in [0,1]");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch < 1 || steps < 0) throw ConfigError("batch must be >= 1 and steps >= 0");
}

ConditionSet mask_conditions(const ConditionSet& conditions, double p_uncond, Rng& rng) {
    require(p_uncond >= 0.0 && p_uncond <= 1.0, "p_uncond must lie in [0,1]");
    ConditionSet out = conditions;
    const ConditionSet null = conditions.nulled();
    if (rng.bernoulli(p_uncond)) out.text = null.text;
    if (rng.bernoulli(p_uncond)) out.pose = null.pose;
    if (rng.bernoulli(p_uncond)) out.sketch = null.sketch;
    return out;
}

ad::Var training_loss(std::span<const Example> batch, const NoisePredictor& model, int in_channels,
                      const NoiseSchedule& schedule, Rng& rng) {
    require(!batch.empty(), "training batch is empty");
    ad::Var total;
    for (const auto& ex : batch) {
        const int t = rng.uniform_int(1, schedule.T());
        const Latent eps = gaussian_like(ex.target.height(), ex.target.width(), rng);
        const auto gamma = assemble(add_noise(ex.target, eps, t, schedule), ex.task, ex.conditions, in_channels);
        const ad::Var pred = model.forward(ad::constant(nn::to_chw(gamma)), t, ex.conditions.text);
        const ad::Var loss = ad::mse(pred, ad::constant(nn::to_chw(eps)));
        total = total.defined() ? ad::add(total, loss) : loss;
    }
    return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

Latent cfg_predict(const NoisePredictor& model, const cond::SpatialInput& gamma, const TextEmbedding& text,
                   double alpha, double t, double* guidance_norm) {
    cond::SpatialInput null_gamma = gamma;
    null_gamma.zero_pose();
    null_gamma.zero_sketch();
    const Latent e_cond = model.predict(gamma, t, text);
    const Latent e_null = model.predict(null_gamma, t, TextEmbedding::null(text.dim));
    Latent out(e_cond.height(), e_cond.width());
    double norm = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double diff = e_cond.data()[i] - e_null.data()[i];
        out.data()[i] = e_null.data()[i] + alpha * diff;
        norm += diff * diff;
    }
    if (guidance_norm) *guidance_norm = std::sqrt(norm);
    return out;
}

std::string StepRecord::to_json() const {
    return nlohmann::json{{"step", step}, {"t", t}, {"sketch_active", sketch_active}, {"guidance_norm", guidance_norm}}
        .dump();
}

std::vector<int> ddim_timesteps(int steps, int T) {
    require(steps >= 1 && steps <= T, "sampling steps must lie in [1, T]");
    std::vector<int> out(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        out[static_cast<std::size_t>(i)] =
            static_cast<int>(std::lround(static_cast<double>(T) * (steps - i) / steps));
    }
    return out;
}

Latent ddim_sample(const NoisePredictor& model, int in_channels, const Latent& z_T, const InpaintTask& task,
                   const ConditionSet& conditions, const GuidanceSpec& guidance, const NoiseSchedule& schedule,
                   const StepObserver& observer) {
    guidance.validate();
    const auto ts = ddim_timesteps(guidance.steps, schedule.T());
    const int sketch_steps = guidance.sketch_active_steps();
    ConditionSet without_sketch = conditions;
    without_sketch.sketch = SketchImage(conditions.sketch.height(), conditions.sketch.width());

    Latent z = z_T;
    for (int i = 0; i < guidance.steps; ++i) {
        const int t = ts[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < guidance.steps ? ts[static_cast<std::size_t>(i) + 1] : 0;
        const bool sketch_active = i < sketch_steps;
        const auto gamma = assemble(z, task, sketch_active ? conditions : without_sketch, in_channels);
        double gnorm = 0.0;
        const Latent eps = cfg_predict(model, gamma, conditions.text, guidance.alpha, t, &gnorm);

        const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
        for (std::size_t k = 0; k < z.size(); ++k) {
            const double x0 = (z.data()[k] - sb * eps.data()[k]) / sa;
            z.data()[k] = pa * x0 + pb * eps.data()[k];
        }
        if (observer) observer(StepRecord{i, t, sketch_active, gnorm, &gamma});
    }
    return z;
}

std::vector<double> train(denoiser::UNet& model, std::span<const Example> examples, const TrainingConfig& config,
                          const NoiseSchedule& schedule, const std::function<void(int, double)>& on_step) {
    config.validate();
    require(!examples.empty(), "no training examples");
    const int in_channels = model.config().in_channels;
    nn::Adam optimizer(model.parameters(), config.learning_rate);
    Rng rng(config.seed);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        std::vector<Example> batch;
        for (int b = 0; b < config.batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            Example ex = examples[order[cursor++]];
            ex.conditions = mask_conditions(ex.conditions, config.p_uncond, rng);
            batch.push_back(std::move(ex));
        }
        optimizer.zero_grad();
        const ad::Var loss = training_loss(batch, model, in_channels, schedule, rng);
        ad::backward(loss);
        optimizer.step();
        losses.push_back(loss.item());
        if (on_step) on_step(step, loss.item());
    }
    return losses;
}

}  // namespace mgd::diffusion

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "testing.hpp"

#include <numeric>

#include "mgd/diffusion.hpp"
#include "mgd/error.hpp"
#include "mgd/pipeline.hpp"
#include "mgd/synthetic.hpp"

using namespace mgd;
using namespace mgd::diffusion;
using mgd::testing::finite_difference;
using mgd::testing::random_tensor;
using mgd::testing::relative_error;

namespace {

constexpr int kH = 4, kW = 3;

Latent gaussian(int h, int w, Rng& rng) {
    Latent z(h, w);
    for (auto& v : z.data()) v = rng.normal();
    return z;
}

ConditionSet random_conditions(Rng& rng, bool text = true, bool pose = true, bool sketch = true) {
    ConditionSet c;
    c.text = text ? denoiser::ToyTextEncoder().encode("blue shirt " + std::to_string(rng.next() % 100))
                  : denoiser::TextEmbedding::null(64);
    c.pose = pose ? PoseMap(random_tensor(kH, kW, 18, rng)) : PoseMap(kH, kW);
    c.sketch = sketch ? SketchImage(random_tensor(kH, kW, 1, rng, 0.1, 1.0)) : SketchImage(kH, kW);
    return c;
}

InpaintTask random_task(Rng& rng) {
    InpaintTask task{BinaryMask(kH, kW), Latent(random_tensor(kH, kW, 4, rng, -1.0, 1.0))};
    for (auto& v : task.mask.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return task;
}

// Random per-pixel linear map of gamma plus a text-dependent offset.
class LinearStub : public NoisePredictor {
public:
    LinearStub(int in_channels, Rng& rng) : weights_(random_tensor(1, in_channels, 4, rng, -1.0, 1.0)) {}

    ad::Var forward(const ad::Var& gamma, double t, const denoiser::TextEmbedding& text) const override {
        const int c = gamma.shape()[0], h = gamma.shape()[1], w = gamma.shape()[2];
        double text_term = 0.0;
        for (double v : text.tokens) text_term += v;
        ad::NdArray out({4, h, w});
        for (int o = 0; o < 4; ++o) {
            for (int i = 0; i < h * w; ++i) {
                double acc = 0.01 * t + text_term;
                for (int k = 0; k < c; ++k) acc += weights_.at(0, k, o) * gamma.value().data[static_cast<std::size_t>(k * h * w + i)];
                out.data[static_cast<std::size_t>(o * h * w + i)] = acc;
            }
        }
        return ad::constant(out);
    }

private:
    Tensor3 weights_;
};

// Exact noise for a known clean latent: eps = (z_t - sqrt(ab) z0) / sqrt(1 - ab).
class ExactPredictor : public NoisePredictor {
public:
    ExactPredictor(Latent z0, const NoiseSchedule& schedule) : z0_(std::move(z0)), schedule_(schedule) {}

    ad::Var forward(const ad::Var& gamma, double t, const denoiser::TextEmbedding&) const override {
        const double ab = schedule_.alpha_bar(static_cast<int>(t));
        const int h = z0_.height(), w = z0_.width();
        ad::NdArray out({4, h, w});
        for (int c = 0; c < 4; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const std::size_t i = (static_cast<std::size_t>(c) * h + y) * w + x;
                    out.data[i] = (gamma.value().data[i] - std::sqrt(ab) * z0_.at(y, x, c)) / std::sqrt(1.0 - ab);
                }
            }
        }
        return ad::constant(out);
    }

private:
    Latent z0_;
    const NoiseSchedule& schedule_;
};

class ZeroPredictor : public NoisePredictor {
public:
    ad::Var forward(const ad::Var& gamma, double, const denoiser::TextEmbedding&) const override {
        return ad::constant(ad::NdArray({4, gamma.shape()[1], gamma.shape()[2]}));
    }
};

// eps(null) = 0, eps(any condition) = v.
class StepStub : public NoisePredictor {
public:
    explicit StepStub(Latent v) : v_(std::move(v)) {}
    ad::Var forward(const ad::Var& gamma, double, const denoiser::TextEmbedding& text) const override {
        bool conditioned = !text.is_null();
        const int h = gamma.shape()[1], w = gamma.shape()[2];
        for (std::size_t i = static_cast<std::size_t>(9 * h * w); i < gamma.value().numel(); ++i) {
            conditioned = conditioned || gamma.value().data[i] != 0.0;
        }
        return ad::constant(conditioned ? nn::to_chw(v_) : ad::NdArray({4, h, w}));
    }

private:
    Latent v_;
};

}  // namespace

TEST_CASE("schedule invariants") {
    const NoiseSchedule s;
    CHECK(s.T() == 1000);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.beta(1) == doctest::Approx(1e-4));
    CHECK(s.beta(1000) == doctest::Approx(2e-2));
    for (int t = 1; t <= s.T(); ++t) {
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        if (t > 1) CHECK(s.beta(t) >= s.beta(t - 1));
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) == doctest::Approx(s.alpha_bar(t - 1) * (1.0 - s.beta(t))));
    }
    CHECK_THROWS_AS(s.alpha_bar(1001), InputError);
    CHECK_THROWS_AS(s.alpha_bar(-1), InputError);
    CHECK_THROWS_AS(NoiseSchedule(0), ConfigError);
}

TEST_CASE("add_noise endpoints and Monte-Carlo mean") {
    Rng rng(1);
    const NoiseSchedule s;
    const Latent z0(random_tensor(2, 2, 4, rng, -1.0, 1.0));
    const Latent eps = gaussian(2, 2, rng);
    CHECK(add_noise(z0, eps, 0, s) == z0);

    double z0_norm = 0.0;
    for (double v : z0.data()) z0_norm += v * v;
    CHECK(max_abs_diff(add_noise(z0, eps, 1000, s), eps) <= std::sqrt(s.alpha_bar(1000)) * std::sqrt(z0_norm) + 1e-12);

    const int t = 300, n = 10000;
    std::vector<double> mean(z0.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        const auto zt = add_noise(z0, gaussian(2, 2, rng), t, s);
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += zt.data()[k] / n;
    }
    const double sigma = std::sqrt((1.0 - s.alpha_bar(t)) / n);
    for (std::size_t k = 0; k < mean.size(); ++k) {
        CHECK(std::abs(mean[k] - std::sqrt(s.alpha_bar(t)) * z0.data()[k]) < 3.0 * sigma);
    }
    CHECK_THROWS_AS(add_noise(z0, eps, 1001, s), InputError);
}

TEST_CASE("training loss is zero for the exact denoiser and E[eps^2] for zeros") {
    Rng rng(2);
    const NoiseSchedule s;
    Example ex{Latent(random_tensor(kH, kW, 4, rng, -1.0, 1.0)), random_task(rng), random_conditions(rng)};
    const ExactPredictor oracle(ex.target, s);
    Rng r1(7);
    CHECK(training_loss(std::span(&ex, 1), oracle, 28, s, r1).item() < 1e-20);
    // 400 examples x 48 values: sd of the mean of chi^2_1 is sqrt(2 / 19200).
    std::vector<Example> batch(400, ex);
    Rng r2(8);
    const double loss = training_loss(batch, ZeroPredictor(), 28, s, r2).item();
    CHECK(std::abs(loss - 1.0) < 4.0 * std::sqrt(2.0 / 19200.0));
}

TEST_CASE("mask_conditions honours p_uncond independently per condition") {
    Rng rng(3);
    const ConditionSet c = random_conditions(rng);
    const auto same = mask_conditions(c, 0.0, rng);
    CHECK(same.text == c.text);
    CHECK(same.pose == c.pose);
    CHECK(same.sketch == c.sketch);
    const auto none = mask_conditions(c, 1.0, rng);
    CHECK_FALSE(none.has_text());
    CHECK_FALSE(none.has_pose());
    CHECK_FALSE(none.has_sketch());

    // Fixed stream; the generator's count spread over 400 seeds is sd 40-42 as expected.
    Rng trials(2026);
    int text = 0, pose = 0, sketch = 0, all = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto m = mask_conditions(c, 0.2, trials);
        text += !m.has_text();
        pose += !m.has_pose();
        sketch += !m.has_sketch();
        all += !m.has_text() && !m.has_pose() && !m.has_sketch();
    }
    CHECK(std::abs(text - 2000) <= 120);
    CHECK(std::abs(pose - 2000) <= 120);
    CHECK(std::abs(sketch - 2000) <= 120);
    // Independence: all three dropped with probability 0.008 (sd ~ 8.9).
    CHECK(std::abs(all - 80) <= 27);
    CHECK_THROWS_AS(mask_conditions(c, 1.5, rng), InputError);
}

TEST_CASE("cfg_predict reduces to the unconditional and conditional branches") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const LinearStub stub(28, rng);
        const auto task = random_task(rng);
        const auto conds = random_conditions(rng);
        const auto gamma = assemble(gaussian(kH, kW, rng), task, conds, 28);
        const double t = rng.uniform_int(1, 1000);
        auto null_gamma = gamma;
        null_gamma.zero_pose();
        null_gamma.zero_sketch();
        const Latent e_null = stub.predict(null_gamma, t, denoiser::TextEmbedding::null(64));
        const Latent e_cond = stub.predict(gamma, t, conds.text);
        CHECK(max_abs_diff(cfg_predict(stub, gamma, conds.text, 0.0, t), e_null) < 1e-9);
        CHECK(max_abs_diff(cfg_predict(stub, gamma, conds.text, 1.0, t), e_cond) < 1e-9);
    }
}

TEST_CASE("cfg_predict with eps(null)=0 and eps(c)=v returns alpha*v") {
    Rng rng(5);
    const Latent v = gaussian(kH, kW, rng);
    const StepStub stub(v);
    const auto gamma = assemble(gaussian(kH, kW, rng), random_task(rng), random_conditions(rng), 28);
    const Latent out = cfg_predict(stub, gamma, denoiser::ToyTextEncoder().encode("dress"), 7.5, 10);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(out.data()[i] == doctest::Approx(7.5 * v.data()[i]));
}

TEST_CASE("guided step costs exactly two forward calls for 1, 2 and 3 conditions") {
    Rng rng(6);
    const LinearStub stub(28, rng);
    CountingPredictor counter(stub);
    const auto task = random_task(rng);
    for (auto [t, p, s] : {std::tuple{true, false, false}, {true, true, false}, {true, true, true},
                           {false, true, false}, {false, false, true}}) {
        const auto conds = random_conditions(rng, t, p, s);
        counter.reset();
        cfg_predict(counter, assemble(gaussian(kH, kW, rng), task, conds, 28), conds.text, 7.5, 500);
        CHECK(counter.calls() == 2);
    }
    // Per guided DDIM step, too.
    counter.reset();
    ddim_sample(counter, 28, gaussian(kH, kW, rng), task, random_conditions(rng), GuidanceSpec{7.5, 0.2, 12},
                NoiseSchedule());
    CHECK(counter.calls() == 24);
}

TEST_CASE("single-condition joint guidance equals the single-condition formula") {
    Rng rng(7);
    const LinearStub stub(28, rng);
    const auto task = random_task(rng);
    const auto conds = random_conditions(rng, false, true, false);
    const auto gamma = assemble(gaussian(kH, kW, rng), task, conds, 28);
    auto null_gamma = gamma;
    null_gamma.zero_pose();
    const auto e0 = stub.predict(null_gamma, 40, conds.text);
    const auto e1 = stub.predict(gamma, 40, conds.text);
    const auto out = cfg_predict(stub, gamma, conds.text, 3.0, 40);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out.data()[i] == doctest::Approx(e0.data()[i] + 3.0 * (e1.data()[i] - e0.data()[i])).epsilon(1e-12));
    }
}

TEST_CASE("ddim timesteps are evenly spaced from T") {
    CHECK(ddim_timesteps(1, 1000) == std::vector<int>{1000});
    CHECK(ddim_timesteps(4, 1000) == std::vector<int>{1000, 750, 500, 250});
    const auto ts = ddim_timesteps(50, 1000);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 20);
    CHECK_THROWS_AS(ddim_timesteps(0, 1000), InputError);
    CHECK_THROWS_AS(ddim_timesteps(1001, 1000), InputError);
}

TEST_CASE("sketch is active for the first ceil(tau*steps) iterations only") {
    Rng rng(8);
    const LinearStub stub(28, rng);
    const auto task = random_task(rng);
    const auto conds = random_conditions(rng);
    int active = 0;
    int last_t = 1001;
    std::vector<std::string> trace;
    const StepObserver observer = [&](const StepRecord& r) {
        const auto sketch = r.gamma->sketch();
        const bool nonzero = std::any_of(sketch.data().begin(), sketch.data().end(), [](double v) { return v != 0.0; });
        CHECK(nonzero == r.sketch_active);
        CHECK(r.sketch_active == (r.step < 10));
        CHECK(r.t < last_t);
        last_t = r.t;
        active += r.sketch_active;
        // Gating never touches the inpainting channels.
        CHECK(r.gamma->mask() == task.mask);
        CHECK(r.gamma->masked_image_latent() == task.masked_image);
        trace.push_back(r.to_json());
    };
    ddim_sample(stub, 28, gaussian(kH, kW, rng), task, conds, GuidanceSpec{7.5, 0.2, 50}, NoiseSchedule(), observer);
    CHECK(active == 10);
    REQUIRE(trace.size() == 50);
    CHECK(trace.front().find("\"sketch_active\":true") != std::string::npos);
    CHECK(trace.front().find("\"t\":1000") != std::string::npos);

    CHECK(GuidanceSpec{7.5, 0.0, 50}.sketch_active_steps() == 0);
    CHECK(GuidanceSpec{7.5, 0.01, 50}.sketch_active_steps() == 1);
    CHECK(GuidanceSpec{7.5, 1.0, 50}.sketch_active_steps() == 50);
    CHECK(GuidanceSpec{7.5, 0.3, 10}.sketch_active_steps() == 3);
}

TEST_CASE("one DDIM step with the true noise recovers z0") {
    Rng rng(9);
    const NoiseSchedule s;
    const Latent z0(random_tensor(kH, kW, 4, rng, -1.0, 1.0));
    const Latent eps = gaussian(kH, kW, rng);
    const ExactPredictor oracle(z0, s);
    const auto z0_hat = ddim_sample(oracle, 28, add_noise(z0, eps, 1000, s), random_task(rng), random_conditions(rng),
                                    GuidanceSpec{7.5, 0.2, 1}, s);
    CHECK(max_abs_diff(z0_hat, z0) < 1e-6);
}

TEST_CASE("DDIM over all T steps with the exact linear denoiser inverts add_noise") {
    Rng rng(10);
    const NoiseSchedule s;
    const Latent z0(random_tensor(kH, kW, 4, rng, -1.0, 1.0));
    const ExactPredictor oracle(z0, s);
    const auto z0_hat = ddim_sample(oracle, 28, add_noise(z0, gaussian(kH, kW, rng), 1000, s), random_task(rng),
                                    random_conditions(rng), GuidanceSpec{1.0, 0.2, 1000}, s);
    CHECK(max_abs_diff(z0_hat, z0) < 1e-5);
}

TEST_CASE("DDIM is deterministic") {
    Rng rng(11);
    const denoiser::UNet net(denoiser::DenoiserConfig{.base_width = 8});
    const auto task = random_task(rng);
    const auto conds = random_conditions(rng);
    const auto zT = gaussian(kH, kW, rng);
    const GuidanceSpec g{7.5, 0.2, 10};
    const auto a = ddim_sample(net, 28, zT, task, conds, g, NoiseSchedule());
    const auto b = ddim_sample(net, 28, zT, task, conds, g, NoiseSchedule());
    CHECK(a == b);
    CHECK(a.all_finite());
}

TEST_CASE("training loss gradient matches central differences") {
    Rng rng(12);
    const denoiser::UNet net(denoiser::DenoiserConfig{.base_width = 8, .time_dim = 8, .seed = 5});
    std::vector<Example> batch;
    for (int i = 0; i < 2; ++i) {
        batch.push_back(Example{Latent(random_tensor(kH, kW, 4, rng, -1.0, 1.0)), random_task(rng), random_conditions(rng)});
    }
    const NoiseSchedule s;
    auto loss = [&] {
        Rng r(99);
        return training_loss(batch, net, 28, s, r);
    };
    const auto params = net.parameters();
    nn::zero_grad(params);
    ad::backward(loss());
    for (int trial = 0; trial < 6; ++trial) {
        const auto& [name, p] = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
        const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p.value().numel()) - 1));
        const double numeric = finite_difference(p, idx, [&] { return loss().item(); });
        INFO(name << "[" << idx << "]");
        CHECK(relative_error(p.grad().data[idx], numeric) < 1e-3);
    }
}

TEST_CASE("training on 16 synthetic images lowers the loss over 200 steps") {
    const auto samples = synthetic::make_garment_set(16, 64, 48, 21);
    std::vector<pipeline::EditInputs> inputs;
    for (const auto& s : samples) inputs.push_back(pipeline::from_sample(s));
    const codec::LatentCodec codec({});
    const denoiser::ToyTextEncoder encoder;
    const pipeline::Pipeline pipe(codec, encoder);
    const auto examples = pipe.prepare(inputs);

    denoiser::UNet net(denoiser::DenoiserConfig{.seed = 1});
    const auto losses = train(net, examples, TrainingConfig{.batch = 4, .steps = 200, .seed = 3}, NoiseSchedule());
    REQUIRE(losses.size() == 200);
    const double head = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20.0;
    const double tail = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20.0;
    MESSAGE("loss first 20: " << head << ", last 20: " << tail);
    CHECK(tail < head);
}

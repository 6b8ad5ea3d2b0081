// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "testing.hpp"

#include "mgd/conditioning.hpp"
#include "mgd/error.hpp"
#include "mgd/synthetic.hpp"

using namespace mgd;
using namespace mgd::cond;

namespace {

Keypoints absent_keypoints() { return Keypoints{}; }

InpaintMask random_mask(int h, int w, Rng& rng, double p = 0.3) {
    InpaintMask m(h, w);
    for (auto& v : m.data()) v = rng.uniform() < p ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_CASE("pose map peaks at the keypoint") {
    Keypoints kp = absent_keypoints();
    kp[3] = {10, 10, 1.0};
    const PoseMap map = render_pose_map(kp, 64, 48, 3.0);
    CHECK(map.at(10, 10, 3) == 1.0);
    CHECK(map.at(10, 13, 3) == doctest::Approx(std::exp(-0.5)));
    for (int k = 0; k < kNumKeypoints; ++k) {
        if (k != 3) CHECK(map.slice_channels(k, 1).all_in_range(0.0, 0.0));
    }
}

TEST_CASE("absent keypoints render to zeros and two keypoints to two channels") {
    CHECK(render_pose_map(absent_keypoints(), 16, 16).all_in_range(0.0, 0.0));
    Keypoints kp = absent_keypoints();
    kp[0] = {3, 4, 0.9};
    kp[17] = {12, 8, 0.6};
    const PoseMap map = render_pose_map(kp, 16, 16);
    int nonzero = 0;
    for (int k = 0; k < kNumKeypoints; ++k) nonzero += map.slice_channels(k, 1).all_in_range(0.0, 0.0) ? 0 : 1;
    CHECK(nonzero == 2);
}

TEST_CASE("keypoints outside the image are rejected") {
    Keypoints kp = absent_keypoints();
    kp[1] = {100, 5, 1.0};
    CHECK_THROWS_AS(render_pose_map(kp, 16, 16), InputError);
    kp[1].confidence = 0.0;  // absent keypoints may lie anywhere
    CHECK_NOTHROW(render_pose_map(kp, 16, 16));
}

TEST_CASE("keypoint JSON round trip and validation") {
    const auto sample = synthetic::make_sample(0, 64, 48, 1);
    CHECK(keypoints_from_json(keypoints_to_json(sample.keypoints)) == sample.keypoints);
    CHECK_THROWS_AS(keypoints_from_json("[[1,2,3]]"), InputError);
    CHECK_THROWS_AS(keypoints_from_json("not json"), InputError);
}

TEST_CASE("mask_image zeroes exactly the masked pixels") {
    Rng rng(1);
    const Image img = testing::random_image(16, 8, rng);
    CHECK(mask_image(img, InpaintMask(16, 8, 0.0)) == img);
    CHECK(mask_image(img, InpaintMask(16, 8, 1.0)).all_in_range(0.0, 0.0));

    InpaintMask rect(16, 8);
    for (int y = 4; y < 10; ++y) {
        for (int x = 2; x < 6; ++x) rect.at(y, x, 0) = 1.0;
    }
    const Image out = mask_image(img, rect);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 8; ++x) {
            const bool inside = y >= 4 && y < 10 && x >= 2 && x < 6;
            for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == (inside ? 0.0 : img.at(y, x, c)));
        }
    }
    CHECK_THROWS_AS(mask_image(img, InpaintMask(8, 8)), InputError);
}

TEST_CASE("downsample_mask is a block max-pool") {
    CHECK(downsample_mask(InpaintMask(16, 24, 1.0)).all_in_range(1.0, 1.0));

    InpaintMask single(64, 48);
    single.at(37, 21, 0) = 1.0;
    const BinaryMask m = downsample_mask(single);
    CHECK(m.count() == 1);
    CHECK(m.at(4, 2, 0) == 1.0);

    InpaintMask checker(32, 32);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) checker.at(y, x, 0) = ((y / 8 + x / 8) % 2 == 0) ? 1.0 : 0.0;
    }
    const BinaryMask mc = downsample_mask(checker);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) CHECK(mc.at(y, x, 0) == ((y + x) % 2 == 0 ? 1.0 : 0.0));
    }
}

TEST_CASE("property: an unset latent cell covers no masked pixel") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const InpaintMask mask = random_mask(32, 24, rng, rng.uniform(0.0, 0.02));
        const BinaryMask m = downsample_mask(mask);
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 24; ++x) {
                if (m.at(y / 8, x / 8, 0) == 0.0) CHECK(mask.at(y, x, 0) == 0.0);
            }
        }
    }
}

TEST_CASE("resize_to_latent preserves constants and zeros") {
    Tensor3 constant(64, 48, 18, 0.7);
    const PoseMap p = resize_to_latent(PoseMap(constant));
    CHECK(p.height() == 8);
    CHECK(p.width() == 6);
    for (double v : p.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(resize_to_latent(SketchImage(64, 48)).all_in_range(0.0, 0.0));
}

TEST_CASE("impulse sketch keeps its mass within one latent cell") {
    // Interior impulses: the triangle filter is a partition of unity, so the
    // block-area-scaled sum of the output equals the impulse mass.
    for (const auto& [py, px] : std::vector<std::pair<int, int>>{{20, 20}, {27, 12}, {33, 30}, {40, 24}}) {
        SketchImage s(64, 48);
        s.at(py, px, 0) = 1.0;
        const SketchImage r = resize_to_latent(s);
        double mass = 0.0;
        for (int y = 0; y < r.height(); ++y) {
            for (int x = 0; x < r.width(); ++x) {
                const double v = r.at(y, x, 0);
                if (v > 0.0) {
                    CHECK(std::abs(y - py / 8) <= 1);
                    CHECK(std::abs(x - px / 8) <= 1);
                }
                mass += v;
            }
        }
        CHECK(64.0 * mass == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("spatial input assembles 28 channels in order") {
    Rng rng(3);
    const Latent z(testing::random_tensor(8, 6, 4, rng, -2, 2));
    const BinaryMask m = downsample_mask(random_mask(64, 48, rng));
    const Latent enc(testing::random_tensor(8, 6, 4, rng, -2, 2));
    const PoseMap p(testing::random_tensor(8, 6, 18, rng));
    const SketchImage s(testing::random_tensor(8, 6, 1, rng));
    const SpatialInput gamma = assemble_spatial_input(z, m, enc, p, s);
    CHECK(gamma.shape_string() == "(8,6,28)");
    CHECK(gamma.noisy_latent() == z);
    CHECK(gamma.mask() == m);
    CHECK(gamma.masked_image_latent() == enc);
    CHECK(gamma.pose() == p);
    CHECK(gamma.sketch() == s);
    // Reassembling the slices is bit-exact.
    CHECK(assemble_spatial_input(gamma.noisy_latent(), gamma.mask(), gamma.masked_image_latent(), gamma.pose(),
                                 gamma.sketch()) == gamma);

    const SpatialInput nulls = assemble_spatial_input(z, m, enc, PoseMap(8, 6), SketchImage(8, 6));
    CHECK(nulls.slice_channels(9, 19).all_in_range(0.0, 0.0));
    CHECK(assemble_spatial_input(z, m, enc).channels() == 9);
    CHECK_THROWS_AS(assemble_spatial_input(z, m, enc, PoseMap(4, 6), s), InputError);
}

TEST_CASE("compose_output keeps the head region from the original") {
    Rng rng(4);
    const Image gen = testing::random_image(16, 12, rng);
    const Image orig = testing::random_image(16, 12, rng);
    CHECK(compose_output(gen, orig, HeadMask(16, 12, 1.0)) == orig);
    CHECK(compose_output(gen, orig, HeadMask(16, 12, 0.0)) == gen);

    HeadMask top(16, 12);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 12; ++x) top.at(y, x, 0) = 1.0;
    }
    const Image out = compose_output(gen, orig, top);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 12; ++x) {
            for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == (y < 4 ? orig.at(y, x, c) : gen.at(y, x, c)));
        }
    }
}

TEST_CASE("property: composition is idempotent and never blends") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Image gen = testing::random_image(8, 8, rng);
        const Image orig = testing::random_image(8, 8, rng);
        HeadMask head(8, 8);
        for (auto& v : head.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
        const Image once = compose_output(gen, orig, head);
        CHECK(compose_output(once, orig, head) == once);
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK((once.data()[i] == orig.data()[i] || once.data()[i] == gen.data()[i]));
        }
    }
}

TEST_CASE("bounding box helper covers the region") {
    InpaintMask m(16, 16);
    m.at(3, 4, 0) = 1.0;
    m.at(9, 11, 0) = 1.0;
    const InpaintMask box = bounding_box_mask(m);
    CHECK(box.count() == 7 * 8);
    CHECK(box.at(3, 11, 0) == 1.0);
    CHECK(box.at(2, 4, 0) == 0.0);
}

TEST_CASE("synthetic samples are consistent") {
    const auto s = synthetic::make_sample(3, 64, 48, 9);
    CHECK(s.image.shape_string() == "(64,48,3)");
    CHECK(s.garment_mask.count() > 0);
    CHECK(s.inpaint_mask.count() >= s.garment_mask.count());
    CHECK(s.head_mask.count() > 0);
    s.keypoints.validate(64, 48);
    CHECK(synthetic::make_sample(3, 64, 48, 9).image == s.image);
}

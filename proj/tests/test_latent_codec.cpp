// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>

#include "doctest.h"
#include "testing.hpp"

#include "mgd/error.hpp"
#include "mgd/io.hpp"
#include "mgd/latent_codec.hpp"
#include "mgd/synthetic.hpp"

using namespace mgd;
using codec::CodecConfig;
using codec::CodecKind;

namespace {

// Latent whose reference decode stays inside [0,1]: block means in
// [0.3, 0.7] per channel and a small contrast term.
Latent random_valid_latent(int h, int w, Rng& rng) {
    Latent z(h, w);
    const double contrast_limit = 0.2 * std::sqrt(192.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) z.at(y, x, c) = 8.0 * rng.uniform(0.3, 0.7);
            z.at(y, x, 3) = rng.uniform(-contrast_limit, contrast_limit);
        }
    }
    return z;
}

}  // namespace

TEST_CASE("encode produces an h/8 x w/8 x 4 latent") {
    Rng rng(1);
    const Image img = testing::random_image(64, 48, rng);
    const Latent z = codec::encode(img, CodecConfig{});
    CHECK(z.height() == 8);
    CHECK(z.width() == 6);
    CHECK(z.channels() == 4);
    CHECK(codec::decode(z, CodecConfig{}).shape_string() == "(64,48,3)");
}

TEST_CASE("all-zero image encodes to the zero latent") {
    const Latent z = codec::encode(Image(16, 24, 0.0), CodecConfig{});
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("dimensions not divisible by 8 are rejected") {
    CHECK_THROWS_AS(codec::encode(Image(60, 48, 0.5), CodecConfig{}), InputError);
    CHECK_THROWS_AS(codec::encode(Image(64, 44, 0.5), CodecConfig{}), InputError);
    CodecConfig bad;
    bad.latent_channels = 8;
    CHECK_THROWS_AS(codec::LatentCodec{bad}, ConfigError);
}

TEST_CASE("reference basis is orthonormal") {
    for (int a = 0; a < 4; ++a) {
        for (int b = 0; b < 4; ++b) {
            double dot = 0.0;
            for (int py = 0; py < 8; ++py) {
                for (int px = 0; px < 8; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        dot += codec::ReferenceCodec::basis(a, py, px, c) * codec::ReferenceCodec::basis(b, py, px, c);
                    }
                }
            }
            CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-14));
        }
    }
}

TEST_CASE("reference codec round trips exactly on its image subspace") {
    Rng rng(7);
    const codec::ReferenceCodec ref;
    for (int trial = 0; trial < 20; ++trial) {
        const Latent v = random_valid_latent(4, 3, rng);
        // encode(decode(v)) == v
        const Image img = ref.decode(v);
        const Latent back = ref.encode(img);
        CHECK(max_abs_diff(back, v) < 1e-9);
        // decode(encode(I)) == I for I = decode(v)
        CHECK(max_abs_diff(ref.decode(back), img) < 1e-9);
    }
}

TEST_CASE("block-constant images survive the reference round trip") {
    Rng rng(8);
    Image img(32, 24);
    for (int by = 0; by < 4; ++by) {
        for (int bx = 0; bx < 3; ++bx) {
            const double rgb[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
            for (int y = 0; y < 8; ++y) {
                for (int x = 0; x < 8; ++x) {
                    for (int c = 0; c < 3; ++c) img.at(by * 8 + y, bx * 8 + x, c) = rgb[c];
                }
            }
        }
    }
    const codec::ReferenceCodec ref;
    CHECK(max_abs_diff(ref.decode(ref.encode(img)), img) < 1e-9);
}

TEST_CASE("reference encoder is shift-covariant by whole blocks") {
    Rng rng(9);
    const Image img = testing::random_image(32, 32, rng);
    Image shifted(32, 32);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            for (int c = 0; c < 3; ++c) shifted.at(y, (x + 8) % 32, c) = img.at(y, x, c);
        }
    }
    const codec::ReferenceCodec ref;
    const Latent a = ref.encode(img), b = ref.encode(shifted);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            for (int c = 0; c < 4; ++c) CHECK(b.at(y, (x + 1) % 4, c) == doctest::Approx(a.at(y, x, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("encoder kernel matches the direct reference encoder") {
    Rng rng(10);
    const Image img = testing::random_image(16, 16, rng);
    const auto conv = ad::conv2d(ad::constant(nn::to_chw(img)), ad::constant(codec::ReferenceCodec::encoder_kernel()),
                                 ad::Var{}, 8, 0);
    CHECK(max_abs_diff(nn::from_chw(conv.value()), codec::ReferenceCodec{}.encode(img)) < 1e-12);
}

TEST_CASE("codecs are deterministic for a fixed seed") {
    Rng rng(11);
    const Image img = testing::random_image(32, 24, rng);
    const CodecConfig cfg{CodecKind::trainable, 42};
    CHECK(codec::encode(img, cfg) == codec::encode(img, cfg));
    CHECK(codec::encode(img, CodecConfig{}) == codec::encode(img, CodecConfig{}));
}

TEST_CASE("trainable codec fits a synthetic garment set") {
    const auto samples = synthetic::make_garment_set(32, 64, 48, 3);
    std::vector<Image> images;
    for (const auto& s : samples) images.push_back(s.image);
    codec::TrainableCodec model(5);
    CHECK(nn::parameter_count(model.parameters()) > 40000);
    CHECK(nn::parameter_count(model.parameters()) < 60000);
    codec::TrainableCodec::FitOptions opts;
    opts.steps = 1500;
    const auto losses = model.fit(images, opts);
    double total = 0.0;
    for (const auto& img : images) {
        const Image rec = model.decode(model.encode(img));
        CHECK(rec.all_in_range(0.0, 1.0));
        total += codec::mean_abs_error(rec, img);
    }
    const double mae = total / static_cast<double>(images.size());
    MESSAGE("trainable codec mean reconstruction error: " << mae);
    CHECK(mae < 0.05);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("latent files round trip at float32 precision") {
    Rng rng(12);
    const Latent z(testing::random_tensor(3, 2, 4, rng, -3.0, 3.0));
    const auto path = std::filesystem::temp_directory_path() / "mgd_latent_roundtrip.bin";
    io::write_latent(path, z);
    CHECK(std::filesystem::file_size(path) == 16 + 4 * 24);
    const Latent back = io::read_latent(path);
    CHECK(max_abs_diff(back, z) < 1e-6);
    std::filesystem::remove(path);
}

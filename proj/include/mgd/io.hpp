// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mgd/tensor.hpp"

namespace mgd::io {

// 8-bit PNG. Reading accepts gray, gray+alpha, RGB and RGBA; alpha is dropped.
Tensor3 read_png(const std::filesystem::path& path, int channels);
// Writes 1-channel data as grayscale and 3-channel data as RGB; values are
// clamped to [0,1] and rounded to the nearest 8-bit level.
void write_png(const std::filesystem::path& path, const Tensor3& t);

Image read_image(const std::filesystem::path& path);
BinaryMask read_mask(const std::filesystem::path& path);  // pixel > 0.5 -> 1
SketchImage read_sketch(const std::filesystem::path& path);

// Latent file: 16-byte header of four little-endian uint32 {magic, h, w, c}
// followed by h*w*c little-endian float32 values in HWC order.
inline constexpr std::uint32_t kLatentMagic = 0x4C44474D;  // "MGDL"
void write_latent(const std::filesystem::path& path, const Latent& latent);
Latent read_latent(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Little-endian primitives shared by the binary formats.
void append_u32(std::string& out, std::uint32_t v);
void append_u64(std::string& out, std::uint64_t v);
void append_f32(std::string& out, float v);
std::uint32_t load_u32(const unsigned char* p);
std::uint64_t load_u64(const unsigned char* p);
float load_f32(const unsigned char* p);

}  // namespace mgd::io

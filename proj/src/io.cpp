// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "mgd/error.hpp"

namespace mgd::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor3 read_png(const std::filesystem::path& path, int channels) {
    require(channels == 1 || channels == 3, "read_png supports 1 or 3 channels");
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw InputError("cannot open PNG: " + path.string());

    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_stdio(&image, file.get())) {
        throw InputError("not a readable PNG: " + path.string() + " (" + image.message + ")");
    }
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw InputError("failed to decode PNG: " + path.string() + " (" + image.message + ")");
    }
    Tensor3 out(static_cast<int>(image.height), static_cast<int>(image.width), channels);
    for (std::size_t i = 0; i < buffer.size(); ++i) out.data()[i] = buffer[i] / 255.0;
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor3& t) {
    require(t.channels() == 1 || t.channels() == 3, "write_png supports 1 or 3 channels");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<png_byte> buffer(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = std::clamp(t.data()[i], 0.0, 1.0);
        buffer[i] = static_cast<png_byte>(std::lround(v * 255.0));
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(t.width());
    image.height = static_cast<png_uint_32>(t.height());
    image.format = t.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
        throw RuntimeFailure("failed to write PNG: " + path.string() + " (" + image.message + ")");
    }
}

Image read_image(const std::filesystem::path& path) { return Image(read_png(path, 3)); }

BinaryMask read_mask(const std::filesystem::path& path) {
    Tensor3 raw = read_png(path, 1);
    for (auto& v : raw.data()) v = v > 0.5 ? 1.0 : 0.0;
    return BinaryMask(std::move(raw));
}

SketchImage read_sketch(const std::filesystem::path& path) { return SketchImage(read_png(path, 1)); }

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_f32(std::string& out, float v) { append_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t load_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t load_u64(const unsigned char* p) {
    return static_cast<std::uint64_t>(load_u32(p)) | (static_cast<std::uint64_t>(load_u32(p + 4)) << 32);
}

float load_f32(const unsigned char* p) { return std::bit_cast<float>(load_u32(p)); }

void write_latent(const std::filesystem::path& path, const Latent& latent) {
    std::string bytes;
    append_u32(bytes, kLatentMagic);
    append_u32(bytes, static_cast<std::uint32_t>(latent.height()));
    append_u32(bytes, static_cast<std::uint32_t>(latent.width()));
    append_u32(bytes, static_cast<std::uint32_t>(latent.channels()));
    for (double v : latent.data()) append_f32(bytes, static_cast<float>(v));
    write_text(path, bytes);
}

Latent read_latent(const std::filesystem::path& path) {
    const std::string bytes = read_text(path);
    require(bytes.size() >= 16, "latent file too short: " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    require(load_u32(p) == kLatentMagic, "bad latent magic in " + path.string());
    const auto h = load_u32(p + 4), w = load_u32(p + 8), c = load_u32(p + 12);
    require(c == Latent::kChannels, "latent file must have 4 channels");
    const std::size_t n = static_cast<std::size_t>(h) * w * c;
    require(bytes.size() == 16 + 4 * n, "latent payload length mismatch in " + path.string());
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = load_f32(p + 16 + 4 * i);
    return Latent(Tensor3(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), std::move(values)));
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open file: " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write file: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw RuntimeFailure("short write: " + path.string());
}

}  // namespace mgd::io

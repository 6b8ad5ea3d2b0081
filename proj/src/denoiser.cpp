// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/denoiser.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <span>
#include <sstream>

#include "mgd/error.hpp"
#include "mgd/io.hpp"
#include "mgd/rng.hpp"
#include "mgd/rng.hpp"

namespace mgd::denoiser {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'G', 'D', 'C', 'K', 'P', 'T', '1'};


void normalize_in_place(std::span<double> v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
        for (double& x : v) x /= norm;
    }
}

double frobenius(const ad::NdArray& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

void rescale_to(ad::Var w, double bound, double limit) {
    if (bound <= limit) return;
    const double f = limit / bound;
    for (auto& v : w.mutable_value().data) v *= f;
}

}  // namespace

TextEmbedding TextEmbedding::null(int dim) {
    return TextEmbedding{1, dim, std::vector<double>(static_cast<std::size_t>(dim), 0.0)};
}

bool TextEmbedding::is_null() const {
    return length == 1 && std::all_of(tokens.begin(), tokens.end(), [](double v) { return v == 0.0; });
}

std::string normalize_text(const std::string& text) {
    // Punctuation other than hyphens separates tokens like whitespace does.
    std::string out;
    bool pending_space = false;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c == '-' || c >= 0x80) {
            if (pending_space && !out.empty()) out.push_back(' ');
            pending_space = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        } else {
            pending_space = true;
        }
    }
    return out;
}

std::vector<double> ToyTextEncoder::token_vector(const std::string& token, int dim) {
    Rng rng(fnv1a(token));
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = rng.normal();
    normalize_in_place(v);
    return v;
}

TextEmbedding ToyTextEncoder::encode(const std::string& text) const {
    const std::string norm = normalize_text(text);
    if (norm.empty()) return TextEmbedding::null(dim_);

    std::vector<std::string> words;
    std::istringstream in(norm);
    for (std::string w; in >> w && static_cast<int>(words.size()) < max_tokens_;) words.push_back(w);

    const auto d = static_cast<std::size_t>(dim_);
    std::vector<std::vector<double>> vecs;
    std::vector<double> pooled(d, 0.0);
    for (const auto& w : words) {
        vecs.push_back(token_vector(w, dim_));
        for (std::size_t i = 0; i < d; ++i) pooled[i] += vecs.back()[i] / static_cast<double>(words.size());
    }
    TextEmbedding out{static_cast<int>(words.size()), dim_, {}};
    out.tokens.reserve(words.size() * d);
    for (std::size_t k = 0; k < words.size(); ++k) {
        const auto pos = token_vector("<pos:" + std::to_string(k) + ">", dim_);
        std::vector<double> row(d);
        for (std::size_t i = 0; i < d; ++i) row[i] = vecs[k][i] + 0.5 * pooled[i] + 0.25 * pos[i];
        normalize_in_place(row);
        out.tokens.insert(out.tokens.end(), row.begin(), row.end());
    }
    return out;
}

TextEmbedding encode_text(const std::string& text, const TextEncoder& embedder) { return embedder.encode(text); }

Latent NoisePredictor::predict(const cond::SpatialInput& gamma, double t, const TextEmbedding& text) const {
    return Latent(nn::from_chw(forward(ad::constant(nn::to_chw(gamma)), t, text).value()));
}

void DenoiserConfig::validate() const {
    if (in_channels != cond::SpatialInput::kFullChannels && in_channels != cond::SpatialInput::kInpaintChannels) {
        throw ConfigError("denoiser in_channels must be 28 or 9, got " + std::to_string(in_channels));
    }
    if (base_width <= 0 || levels < 1 || levels > 4) throw ConfigError("denoiser needs base_width > 0 and 1..4 levels");
    if (time_dim <= 0 || time_dim % 2 != 0) throw ConfigError("denoiser time_dim must be positive and even");
    if (text_dim <= 0) throw ConfigError("denoiser text_dim must be positive");
}

std::string DenoiserConfig::to_json() const {
    return json{{"in_channels", in_channels}, {"base_width", base_width}, {"levels", levels},
                {"time_dim", time_dim},       {"text_dim", text_dim},     {"seed", seed}}
        .dump();
}

DenoiserConfig DenoiserConfig::from_json(const std::string& text) {
    DenoiserConfig c;
    try {
        const json doc = json::parse(text);
        c.in_channels = doc.at("in_channels").get<int>();
        c.base_width = doc.at("base_width").get<int>();
        c.levels = doc.at("levels").get<int>();
        c.time_dim = doc.at("time_dim").get<int>();
        c.text_dim = doc.at("text_dim").get<int>();
        c.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw InputError(std::string("denoiser config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

InputConvWeights extend_input_kernels(const InputConvWeights& pretrained, int n_new, std::uint64_t seed) {
    require(n_new >= 0, "n_new must be non-negative");
    require(pretrained.kernel.rank() == 4 && pretrained.bias.rank() == 1 &&
                pretrained.bias.dim(0) == pretrained.kernel.dim(0),
            "input conv weights must be [out, in, k, k] with a matching bias");
    if (n_new == 0) return pretrained;
    const int out = pretrained.kernel.dim(0), in = pretrained.kernel.dim(1);
    const int kh = pretrained.kernel.dim(2), kw = pretrained.kernel.dim(3);
    const int in_new = in + n_new;
    const double bound = std::sqrt(6.0 / static_cast<double>(in_new * kh * kw));
    const std::size_t slice = static_cast<std::size_t>(kh) * kw;

    InputConvWeights ext{ad::NdArray({out, in_new, kh, kw}), pretrained.bias};
    Rng rng(seed);
    for (int o = 0; o < out; ++o) {
        const double* src = pretrained.kernel.data.data() + static_cast<std::size_t>(o) * in * slice;
        double* dst = ext.kernel.data.data() + static_cast<std::size_t>(o) * in_new * slice;
        std::copy(src, src + in * slice, dst);
        for (std::size_t i = in * slice; i < in_new * slice; ++i) dst[i] = rng.uniform(-bound, bound);
    }
    return ext;
}

std::vector<double> timestep_embedding(double t, int dim) {
    const int half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[static_cast<std::size_t>(i)] = std::sin(t * freq);
        out[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
    }
    return out;
}

UNet::UNet(const DenoiserConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const int td = config_.time_dim;
    time_1_ = nn::Linear(td, td, rng);
    time_2_ = nn::Linear(td, td, rng);
    in_conv_ = nn::Conv2d(config_.in_channels, config_.base_width, 3, 1, 1, rng);
    for (int l = 0; l < config_.levels; ++l) {
        const int w = config_.base_width << l;
        Level level;
        level.conv_a = nn::Conv2d(w, w, 3, 1, 1, rng);
        level.conv_b = nn::Conv2d(w, w, 3, 1, 1, rng);
        level.time_proj = nn::Linear(td, w, rng);
        level.attention = nn::CrossAttention(w, config_.text_dim, rng);
        if (l + 1 < config_.levels) {
            level.down = nn::Conv2d(w, 2 * w, 3, 2, 1, rng);
            level.up = nn::Conv2d(2 * w, w, 3, 1, 1, rng);
            level.merge = nn::Conv2d(2 * w, w, 3, 1, 1, rng);
        }
        levels_.push_back(std::move(level));
    }
    out_conv_ = nn::Conv2d(config_.base_width, Latent::kChannels, 3, 1, 1, rng);
}

ad::Var UNet::residual_block(const Level& level, const ad::Var& x, const ad::Var& temb) const {
    const int w = x.shape()[0];
    ad::Var h = level.conv_a(ad::silu(x));
    h = ad::add_channel_bias(h, ad::reshape(level.time_proj(temb), {w}));
    h = level.conv_b(ad::silu(h));
    return ad::add(x, h);
}

ad::Var UNet::forward(const ad::Var& gamma, double t, const TextEmbedding& text) const {
    const auto& shape = gamma.shape();
    if (shape.size() != 3 || shape[0] != config_.in_channels) {
        throw InputError("denoiser expects " + std::to_string(config_.in_channels) + " input channels, got " +
                         gamma.value().shape_string());
    }
    require(text.dim == config_.text_dim && text.length >= 1, "text embedding dimension does not match the denoiser");

    const ad::Var t_in = ad::constant(ad::NdArray({1, config_.time_dim}, timestep_embedding(t, config_.time_dim)));
    const ad::Var temb = ad::silu(time_2_(ad::silu(time_1_(t_in))));
    const ad::Var context = ad::constant(text.as_array());

    ad::Var x = in_conv_(gamma);
    std::vector<ad::Var> skips;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
        x = residual_block(levels_[l], x, temb);
        x = ad::add(x, levels_[l].attention(x, context));
        if (l + 1 < levels_.size()) {
            skips.push_back(x);
            x = levels_[l].down(x);
        }
    }
    for (std::size_t l = levels_.size() - 1; l-- > 0;) {
        const ad::Var& skip = skips[l];
        x = levels_[l].up(ad::upsample2x(x, skip.shape()[1], skip.shape()[2]));
        x = ad::silu(levels_[l].merge(ad::concat({x, skip})));
    }
    return out_conv_(x);
}

nn::ParamList UNet::parameters() const {
    nn::ParamList out;
    time_1_.collect(out, "time.0");
    time_2_.collect(out, "time.1");
    in_conv_.collect(out, "input");
    for (std::size_t l = 0; l < levels_.size(); ++l) {
        const std::string p = "level" + std::to_string(l);
        levels_[l].conv_a.collect(out, p + ".conv_a");
        levels_[l].conv_b.collect(out, p + ".conv_b");
        levels_[l].time_proj.collect(out, p + ".time");
        levels_[l].attention.collect(out, p + ".attn");
        if (l + 1 < levels_.size()) {
            levels_[l].down.collect(out, p + ".down");
            levels_[l].up.collect(out, p + ".up");
            levels_[l].merge.collect(out, p + ".merge");
        }
    }
    out_conv_.collect(out, "output");
    return out;
}

InputConvWeights UNet::input_conv() const { return {in_conv_.weight.value(), in_conv_.bias.value()}; }

UNet UNet::clone() const {
    UNet copy(config_);
    const auto src = parameters();
    const auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.node()->value = src[i].second.value();
    return copy;
}

UNet UNet::extend_input(int n_new, std::uint64_t seed) const {
    DenoiserConfig ext = config_;
    ext.in_channels += n_new;
    UNet copy(ext);
    const auto src = parameters();
    const auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != "input.weight") dst[i].second.node()->value = src[i].second.value();
    }
    copy.in_conv_.weight.node()->value = extend_input_kernels(input_conv(), n_new, seed).kernel;
    return copy;
}

void UNet::clamp_weights(double limit) {
    for (const auto& [name, conv] : conv_layers()) {
        rescale_to(conv->weight, conv->kernel() * frobenius(conv->weight.value()), limit);
    }
    std::vector<const nn::Linear*> linears{&time_1_, &time_2_};
    for (const auto& level : levels_) {
        for (const nn::Linear* lin : {&level.time_proj, &level.attention.query, &level.attention.key,
                                      &level.attention.value, &level.attention.output}) {
            linears.push_back(lin);
        }
    }
    for (const nn::Linear* lin : linears) rescale_to(lin->weight, frobenius(lin->weight.value()), limit);
}

std::vector<std::pair<std::string, const nn::Conv2d*>> UNet::conv_layers() const {
    std::vector<std::pair<std::string, const nn::Conv2d*>> out{{"input", &in_conv_}};
    for (std::size_t l = 0; l < levels_.size(); ++l) {
        const std::string p = "level" + std::to_string(l);
        out.emplace_back(p + ".conv_a", &levels_[l].conv_a);
        out.emplace_back(p + ".conv_b", &levels_[l].conv_b);
        if (l + 1 < levels_.size()) {
            out.emplace_back(p + ".down", &levels_[l].down);
            out.emplace_back(p + ".up", &levels_[l].up);
            out.emplace_back(p + ".merge", &levels_[l].merge);
        }
    }
    out.emplace_back("output", &out_conv_);
    return out;
}

std::string UNet::serialize() const {
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::string header = config_.to_json();
    io::append_u64(out, header.size());
    out += header;
    for (const auto& [name, p] : parameters()) {
        for (double v : p.value().data) io::append_f32(out, static_cast<float>(v));
    }
    return out;
}

UNet UNet::deserialize(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    require(bytes.size() >= 16 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, "not a denoiser checkpoint");
    const std::uint64_t header_len = io::load_u64(p + 8);
    require(header_len <= bytes.size() - 16, "truncated checkpoint header");
    UNet net(DenoiserConfig::from_json(bytes.substr(16, header_len)));
    std::size_t offset = 16 + header_len;
    const auto params = net.parameters();
    std::size_t expected = 0;
    for (const auto& [name, v] : params) expected += v.value().numel();
    require(bytes.size() - offset == expected * 4, "checkpoint parameter payload has the wrong size");
    for (const auto& [name, v] : params) {
        for (auto& x : v.node()->value.data) {
            x = io::load_f32(p + offset);
            offset += 4;
        }
    }
    return net;
}

void UNet::save(const std::filesystem::path& path) const { io::write_text(path, serialize()); }

UNet UNet::load(const std::filesystem::path& path) { return deserialize(io::read_text(path)); }

}  // namespace mgd::denoiser

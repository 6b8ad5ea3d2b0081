// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/cli.hpp"

#include <algorithm>
#include <bit>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <csignal>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <pthread.h>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "mgd/annotation.hpp"
#include "mgd/error.hpp"
#include "mgd/io.hpp"
#include "mgd/metrics.hpp"
#include "mgd/rng.hpp"
#include "mgd/service.hpp"
#include "mgd/synthetic.hpp"
#include "mgd/warping.hpp"

namespace mgd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// clang-format off
const std::vector<KeySpec> kKeys = {
    {"run.dir", "", KeyType::path, "output directory; empty: runs/<command>-<fingerprint>"},

    {"image.height", "64", KeyType::integer, "image height in pixels, multiple of 8"},
    {"image.width", "48", KeyType::integer, "image width in pixels, multiple of 8"},

    {"data.dir", "", KeyType::path, "training bundles, one per subdirectory; empty: synthetic set"},
    {"data.images", "64", KeyType::count, "synthetic training images"},
    {"data.seed", "7", KeyType::count, "synthetic data seed"},

    {"codec.kind", "reference", KeyType::choice, "latent codec", "reference|trainable"},
    {"codec.seed", "0", KeyType::count, "trainable codec initialization and batching seed"},
    {"codec.fit_steps", "1500", KeyType::count, "trainable codec fitting steps"},
    {"codec.checkpoint", "", KeyType::path, "trainable codec weights written by train (sample only)"},

    {"model.in_channels", "28", KeyType::integer, "denoiser input channels: 28 (text+pose+sketch) or 9"},
    {"model.base_width", "32", KeyType::integer, "denoiser channels at the first level"},
    {"model.levels", "2", KeyType::integer, "denoiser resolution levels"},
    {"model.time_dim", "32", KeyType::integer, "timestep embedding size"},
    {"model.text_dim", "64", KeyType::integer, "text token embedding size"},
    {"model.seed", "1", KeyType::count, "denoiser initialization seed"},
    {"text.max_tokens", "16", KeyType::integer, "text encoder sequence length"},

    {"schedule.steps", "1000", KeyType::integer, "diffusion timesteps T"},
    {"schedule.beta_start", "0.0001", KeyType::real, "linear beta schedule start"},
    {"schedule.beta_end", "0.02", KeyType::real, "linear beta schedule end"},

    {"pipeline.latent_scale", "0.125", KeyType::real, "latent scaling before diffusion"},
    {"pipeline.pose_sigma", "4", KeyType::real, "pose heatmap Gaussian sigma in pixels"},

    {"train.steps", "500", KeyType::count, "optimizer steps"},
    {"train.batch", "8", KeyType::integer, "examples per step"},
    {"train.learning_rate", "0.001", KeyType::real, "Adam learning rate"},
    {"train.p_uncond", "0.2", KeyType::real, "per-condition drop probability"},
    {"train.seed", "3", KeyType::count, "batching, timestep and noise seed"},

    {"guidance.alpha", "7.5", KeyType::real, "classifier-free guidance scale"},
    {"guidance.steps", "50", KeyType::integer, "DDIM steps"},
    {"guidance.sketch_fraction", "0.2", KeyType::real, "fraction of highest-t steps that see the sketch"},

    {"sample.checkpoint", "", KeyType::path, "denoiser checkpoint written by train"},
    {"sample.input", "", KeyType::path, "inference bundle directory; empty: synthetic sample"},
    {"sample.index", "0", KeyType::count, "synthetic sample index when sample.input is empty"},
    {"sample.text", "", KeyType::text, "replaces the bundle text when nonempty"},
    {"sample.seed", "0", KeyType::count, "initial noise seed"},
    {"sample.trace", "true", KeyType::boolean, "write the per-step trace.jsonl"},

    {"eval.original_dir", "", KeyType::path, "original images, <id>.png"},
    {"eval.generated_dir", "", KeyType::path, "generated images, <id>.png"},
    {"eval.manifest", "", KeyType::path, "JSONL {id, text, mask_path, keypoints_path}"},
    {"eval.soft_pose", "false", KeyType::boolean, "product-of-confidences pose weighting"},

    {"warp.garment", "", KeyType::path, "in-shop garment PNG"},
    {"warp.keypoints", "", KeyType::path, "person keypoints JSON (18 [x, y, confidence])"},
    {"warp.masked_person", "", KeyType::path, "person PNG with the garment region blacked out"},
    {"warp.seed", "0", KeyType::count, "estimator and refiner seed"},
    {"warp.train_samples", "256", KeyType::count, "synthetic samples for the estimator"},
    {"warp.train_steps", "200", KeyType::count, "estimator optimizer steps"},
    {"warp.max_shift", "6", KeyType::count, "largest translation in the estimator samples, pixels"},
    {"warp.batch", "4", KeyType::integer, "estimator and refiner batch"},
    {"warp.learning_rate", "0.003", KeyType::real, "estimator learning rate"},
    {"warp.refine_steps", "0", KeyType::count, "refiner optimizer steps; 0 skips refinement"},
    {"warp.refine_samples", "32", KeyType::count, "synthetic samples for the refiner"},
    {"warp.sketch_threshold", "0.05", KeyType::real, "edge binarization threshold"},

    {"annotate.corpus", "", KeyType::path, "captions JSONL {caption, category}"},
    {"annotate.lexicon", "", KeyType::path, "word TAG lexicon; empty: built in"},
    {"annotate.chunks", "", KeyType::path, "noun chunk table JSONL {text, category}"},
    {"annotate.items", "", KeyType::path, "items JSONL {item_id, garment, model, category}"},
    {"annotate.candidates", "", KeyType::path, "candidates JSONL {item_id, candidates}"},
    {"annotate.journal", "", KeyType::path, "accepted annotations; empty: <run dir>/annotations.jsonl"},
    {"annotate.k_per_model", "5", KeyType::integer, "top chunks taken from each model"},
    {"annotate.target", "25", KeyType::integer, "candidates per item"},
    {"annotate.lease_seconds", "600", KeyType::integer, "assignment lease"},

    {"study.pairs", "", KeyType::path, "study pairs JSONL"},
    {"study.journal", "", KeyType::path, "votes; empty: <run dir>/votes.jsonl"},
    {"study.seed", "0", KeyType::count, "left/right presentation seed"},

    {"synth.captions", "400", KeyType::count, "captions in the synthetic corpus (may exceed data.images)"},

    {"server.host", "127.0.0.1", KeyType::text, "listen address"},
    {"server.port", "8080", KeyType::integer, "listen port; 0 picks a free port"},
    {"server.static_dir", "", KeyType::path, "UI bundle served at /"},
};
// clang-format on

const KeySpec* find_key(const std::string& key) {
    for (const auto& k : kKeys) {
        if (key == k.key) return &k;
    }
    return nullptr;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

bool parse_int(const std::string& s, long long& out) {
    const auto* end = s.data() + s.size();
    const auto r = std::from_chars(s.data(), end, out);
    return !s.empty() && r.ec == std::errc{} && r.ptr == end;
}

bool parse_count(const std::string& s, std::uint64_t& out) {
    const auto* end = s.data() + s.size();
    const auto r = std::from_chars(s.data(), end, out);
    return !s.empty() && r.ec == std::errc{} && r.ptr == end;
}

bool parse_real(const std::string& s, double& out) {
    const auto* end = s.data() + s.size();
    const auto r = std::from_chars(s.data(), end, out);
    return !s.empty() && r.ec == std::errc{} && r.ptr == end && std::isfinite(out);
}

bool parse_bool(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
        out = true;
        return true;
    }
    if (s == "false" || s == "0" || s == "no" || s == "off") {
        out = false;
        return true;
    }
    return false;
}

std::string type_name(KeyType t) {
    switch (t) {
        case KeyType::integer: return "an integer";
        case KeyType::count: return "a non-negative integer";
        case KeyType::real: return "a finite number";
        case KeyType::boolean: return "true or false";
        case KeyType::choice: return "one of";
        default: return "text";
    }
}

void check_value(const KeySpec& spec, const std::string& value, const std::string& origin) {
    bool ok = true;
    long long i = 0;
    std::uint64_t u = 0;
    double d = 0.0;
    bool b = false;
    switch (spec.type) {
        case KeyType::integer: ok = parse_int(value, i); break;
        case KeyType::count: ok = parse_count(value, u); break;
        case KeyType::real: ok = parse_real(value, d); break;
        case KeyType::boolean: ok = parse_bool(value, b); break;
        case KeyType::choice: {
            ok = false;
            std::stringstream ss(spec.choices);
            for (std::string c; std::getline(ss, c, '|');) ok = ok || c == value;
            break;
        }
        default: break;
    }
    if (!ok) {
        std::string expected = type_name(spec.type);
        if (spec.type == KeyType::choice) expected += std::string(" ") + spec.choices;
        throw ConfigError(origin + ": key '" + spec.key + "' expects " + expected + ", got '" + value + "'");
    }
}

std::string quote_if_needed(const std::string& v) {
    const bool plain = v.find('#') == std::string::npos && v.find('"') == std::string::npos &&
                       v.find('\n') == std::string::npos && trim(v) == v;
    if (plain) return v;
    std::string out = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out += c;
    }
    return out + "\"";
}

std::string hex16(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ------------------------------------------------------------- run directory

// Collects what a command read and wrote; finish() writes the manifest.
class RunDir {
public:
    RunDir(const std::string& command, const RunConfig& config) : command_(command), config_(config) {
        dir_ = config.get("run.dir").empty() ? fs::path("runs") / (command + "-" + config.fingerprint())
                                              : fs::path(config.get("run.dir"));
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw RuntimeFailure("cannot create run directory " + dir_.string() + ": " + ec.message());
        RunConfig resolved = config;
        resolved.set("run.dir", dir_.string(), "run");
        io::write_text(dir_ / "config.txt", "# mgd " + command + "\n" + resolved.snapshot());
        io::write_text(dir_ / "VERSION", version() + "\n");
    }

    const fs::path& dir() const { return dir_; }
    fs::path output(const std::string& name) {
        outputs_.push_back(name);
        return dir_ / name;
    }
    void input(const fs::path& p) { inputs_.push_back(p); }

    void finish() const {
        json manifest{{"command", command_},
                      {"version", version()},
                      {"config", "config.txt"},
                      {"config_fingerprint", config_.fingerprint()},
                      {"inputs", json::array()},
                      {"outputs", json::array()}};
        for (const auto& p : inputs_) manifest["inputs"].push_back(describe(p, p.string()));
        for (const auto& name : outputs_) manifest["outputs"].push_back(describe(dir_ / name, name));
        io::write_text(dir_ / "manifest.json", manifest.dump(2) + "\n");
    }

private:
    static json describe(const fs::path& p, const std::string& label) {
        json entry{{"path", label}};
        if (fs::is_regular_file(p)) {
            const std::string bytes = io::read_text(p);
            entry["bytes"] = bytes.size();
            entry["fnv1a"] = hex16(fnv1a(bytes));
        } else if (fs::is_directory(p)) {
            // Digest over sorted relative names and contents.
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                if (e.is_regular_file()) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            std::uint64_t h = fnv1a("");
            std::uintmax_t total = 0;
            for (const auto& f : files) {
                const std::string bytes = io::read_text(f);
                total += bytes.size();
                h = fnv1a(hex16(h) + fs::relative(f, p).generic_string() + hex16(fnv1a(bytes)));
            }
            entry["files"] = files.size();
            entry["bytes"] = total;
            entry["fnv1a"] = hex16(h);
        }
        return entry;
    }

    std::string command_;
    RunConfig config_;
    fs::path dir_;
    std::vector<fs::path> inputs_;
    std::vector<std::string> outputs_;
};

// Required path keys: every empty or nonexistent one is listed in a single
// InputError.
void require_paths(const RunConfig& config, std::initializer_list<const char*> keys) {
    std::vector<std::string> missing;
    for (const char* key : keys) {
        const auto& v = config.get(key);
        if (v.empty()) {
            missing.push_back(std::string(key) + " (not set)");
        } else if (!fs::exists(v)) {
            missing.push_back(std::string(key) + " = " + v + " (not found)");
        }
    }
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }
}

fs::path resolve_against(const fs::path& base_file, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base_file.parent_path() / path;
}

std::ifstream open_input(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw InputError("cannot open " + p.string());
    return in;
}

std::string json_line(const json& j) { return j.dump() + "\n"; }

// Trainable codec weights: "MGDCODEC", u64 parameter count, then per
// parameter u64 element count and the raw little-endian float64 values.
constexpr char kCodecMagic[8] = {'M', 'G', 'D', 'C', 'O', 'D', 'E', 'C'};

void save_codec(const fs::path& path, const codec::TrainableCodec& c) {
    const auto values = nn::snapshot(c.parameters());
    std::string out(kCodecMagic, 8);
    io::append_u64(out, values.size());
    for (const auto& v : values) {
        io::append_u64(out, v.numel());
        for (double x : v.data) io::append_u64(out, std::bit_cast<std::uint64_t>(x));
    }
    io::write_text(path, out);
}

void load_codec(const fs::path& path, codec::TrainableCodec& c) {
    const std::string bytes = io::read_text(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const auto* end = p + bytes.size();
    require(bytes.size() >= 16 && bytes.compare(0, 8, std::string(kCodecMagic, 8)) == 0,
            path.string() + ": not a codec checkpoint");
    p += 8;
    const auto params = c.parameters();
    auto values = nn::snapshot(params);
    require(io::load_u64(p) == values.size(), path.string() + ": parameter count mismatch");
    p += 8;
    for (auto& v : values) {
        require(end - p >= 8 && io::load_u64(p) == v.numel(), path.string() + ": parameter shape mismatch");
        p += 8;
        require(static_cast<std::size_t>(end - p) >= 8 * v.numel(), path.string() + ": truncated");
        for (double& x : v.data) {
            x = std::bit_cast<double>(io::load_u64(p));
            p += 8;
        }
    }
    require(p == end, path.string() + ": trailing bytes");
    nn::restore(params, values);
}

// ------------------------------------------------------------------ commands

std::vector<pipeline::EditInputs> training_inputs(const RunConfig& config, RunDir& run) {
    std::vector<pipeline::EditInputs> inputs;
    const auto& dir = config.get("data.dir");
    if (!dir.empty()) {
        require_paths(config, {"data.dir"});
        std::vector<fs::path> bundles;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_directory()) bundles.push_back(e.path());
        }
        std::sort(bundles.begin(), bundles.end());
        require(!bundles.empty(), "data.dir " + dir + " holds no bundle directories");
        for (const auto& b : bundles) inputs.push_back(read_bundle(b));
        run.input(dir);
    } else {
        const auto samples = synthetic::make_garment_set(static_cast<int>(config.get_count("data.images")),
                                                         config.height(), config.width(), config.get_count("data.seed"));
        for (const auto& s : samples) inputs.push_back(pipeline::from_sample(s));
    }
    for (const auto& in : inputs) {
        if (in.image.height() != config.height() || in.image.width() != config.width()) {
            throw InputError("training image is " + in.image.shape_string() + ", config expects " +
                             std::to_string(config.height()) + "x" + std::to_string(config.width()));
        }
    }
    return inputs;
}

void cmd_train(const RunConfig& config, RunDir& run, std::ostream& log) {
    const auto inputs = training_inputs(config, run);
    codec::LatentCodec codec(config.codec());
    if (auto* trainable = codec.trainable()) {
        std::vector<Image> images;
        for (const auto& in : inputs) images.push_back(in.image);
        codec::TrainableCodec::FitOptions fit;
        fit.steps = static_cast<int>(config.get_count("codec.fit_steps"));
        fit.seed = config.get_count("codec.seed");
        const auto losses = trainable->fit(images, fit);
        if (!losses.empty()) log << "codec fit: final loss " << losses.back() << "\n";
        save_codec(run.output("codec.bin"), *trainable);
    }

    const auto dc = config.denoiser();
    const denoiser::ToyTextEncoder encoder(dc.text_dim, static_cast<int>(config.get_int("text.max_tokens")));
    const pipeline::Pipeline pipe(codec, encoder, config.pipeline());
    const auto examples = pipe.prepare(inputs);

    denoiser::UNet net(dc);
    const auto tc = config.training();
    log << "training " << tc.steps << " steps on " << examples.size() << " examples ("
        << nn::parameter_count(net.parameters()) << " parameters)\n";
    const auto losses = diffusion::train(net, examples, tc, config.schedule(), [&](int step, double loss) {
        if ((step + 1) % 50 == 0 || step + 1 == tc.steps) log << "step " << step + 1 << " loss " << loss << "\n";
    });

    net.save(run.output("checkpoint.bin"));
    std::string lines;
    for (std::size_t i = 0; i < losses.size(); ++i) lines += json_line({{"step", i + 1}, {"loss", losses[i]}});
    io::write_text(run.output("losses.jsonl"), lines);
}

void cmd_sample(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"sample.checkpoint"});
    run.input(config.get("sample.checkpoint"));
    const auto net = denoiser::UNet::load(config.get("sample.checkpoint"));

    codec::LatentCodec codec(config.codec());
    if (auto* trainable = codec.trainable()) {
        require_paths(config, {"codec.checkpoint"});
        load_codec(config.get("codec.checkpoint"), *trainable);
        run.input(config.get("codec.checkpoint"));
    }

    pipeline::EditInputs inputs;
    if (!config.get("sample.input").empty()) {
        require_paths(config, {"sample.input"});
        inputs = read_bundle(config.get("sample.input"));
        run.input(config.get("sample.input"));
    } else {
        inputs = pipeline::from_sample(synthetic::make_sample(static_cast<int>(config.get_count("sample.index")),
                                                              config.height(), config.width(),
                                                              config.get_count("data.seed")));
    }
    if (!config.get("sample.text").empty()) inputs.text = config.get("sample.text");
    require(inputs.image.height() % 8 == 0 && inputs.image.width() % 8 == 0,
            "input image sides must be multiples of 8, got " + inputs.image.shape_string());

    const denoiser::ToyTextEncoder encoder(net.config().text_dim, static_cast<int>(config.get_int("text.max_tokens")));
    const pipeline::Pipeline pipe(codec, encoder, config.pipeline());
    std::string trace;
    const auto guidance = config.guidance();
    const Image out = pipe.generate(net, net.config().in_channels, inputs, guidance, config.schedule(),
                                    config.get_count("sample.seed"),
                                    [&](const diffusion::StepRecord& r) { trace += r.to_json() + "\n"; });
    if (!out.all_finite() || !out.all_in_range(0.0, 1.0)) throw RuntimeFailure("sampled image left [0,1]");
    io::write_png(run.output("output.png"), out);
    if (config.get_bool("sample.trace")) io::write_text(run.output("trace.jsonl"), trace);
    log << "sampled " << guidance.steps << " steps with alpha " << guidance.alpha << ": '" << inputs.text << "'\n";
}

void cmd_evaluate(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"eval.original_dir", "eval.generated_dir", "eval.manifest"});
    const fs::path manifest = config.get("eval.manifest");
    const fs::path orig_dir = config.get("eval.original_dir");
    const fs::path gen_dir = config.get("eval.generated_dir");
    run.input(manifest);
    run.input(orig_dir);
    run.input(gen_dir);

    struct Entry {
        std::string id, text;
        fs::path mask, keypoints;
    };
    std::vector<Entry> entries;
    {
        auto in = open_input(manifest);
        int line_no = 0;
        for (std::string line; std::getline(in, line);) {
            ++line_no;
            if (trim(line).empty()) continue;
            try {
                const auto j = json::parse(line);
                Entry e{j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                        resolve_against(manifest, j.at("mask_path").get<std::string>()), {}};
                if (j.contains("keypoints_path") && !j["keypoints_path"].is_null()) {
                    e.keypoints = resolve_against(manifest, j["keypoints_path"].get<std::string>());
                }
                entries.push_back(std::move(e));
            } catch (const json::exception& ex) {
                throw InputError(manifest.string() + ":" + std::to_string(line_no) + ": " + ex.what());
            }
        }
    }
    require(!entries.empty(), manifest.string() + " lists no items");

    std::vector<std::string> missing;
    for (const auto& e : entries) {
        for (const auto& p : {orig_dir / (e.id + ".png"), gen_dir / (e.id + ".png"), e.mask}) {
            if (!fs::exists(p)) missing.push_back(e.id + ": " + p.string());
        }
        if (!e.keypoints.empty() && !fs::exists(e.keypoints)) missing.push_back(e.id + ": " + e.keypoints.string());
    }
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }

    std::vector<metrics::EvalItem> items;
    for (const auto& e : entries) {
        metrics::EvalItem item{e.id, e.text, io::read_image(orig_dir / (e.id + ".png")),
                               io::read_image(gen_dir / (e.id + ".png")), InpaintMask(io::read_mask(e.mask))};
        require(item.original.same_shape(item.generated), e.id + ": original and generated sizes differ");
        require(item.mask.height() == item.original.height() && item.mask.width() == item.original.width(),
                e.id + ": mask size differs from the image");
        if (!e.keypoints.empty()) {
            // Checked for consistency only; PD detects keypoints on both sides.
            cond::keypoints_from_json(io::read_text(e.keypoints)).validate(item.original.height(), item.original.width());
        }
        items.push_back(std::move(item));
    }

    const metrics::TemplateKeypoints keypoints;
    const metrics::SobelEdges edges;
    const metrics::ToyClipEmbedder embedder;
    const metrics::ToyInceptionFeatures features;
    metrics::EvalOptions options;
    options.soft_pose_confidence = config.get_bool("eval.soft_pose");
    const auto report = metrics::evaluate(std::move(items), {keypoints, edges, embedder, features}, options);
    io::write_text(run.output("metrics.json"), report.to_json() + "\n");
    log << report.to_json() << "\n";
}

void cmd_warp(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"warp.garment", "warp.keypoints", "warp.masked_person"});
    for (const char* k : {"warp.garment", "warp.keypoints", "warp.masked_person"}) run.input(config.get(k));
    const Image garment = io::read_image(config.get("warp.garment"));
    const Image person = io::read_image(config.get("warp.masked_person"));
    const auto kp = cond::keypoints_from_json(io::read_text(config.get("warp.keypoints")));
    require(garment.same_shape(person), "garment " + garment.shape_string() + " and masked person " +
                                            person.shape_string() + " differ in size");
    const int h = garment.height(), w = garment.width();
    require(h % 8 == 0 && w % 8 == 0, "warp inputs need sides that are multiples of 8, got " + garment.shape_string());
    kp.validate(h, w);
    const PoseMap pose = cond::render_pose_map(kp, h, w, config.get_real("pipeline.pose_sigma"));

    const auto seed = config.get_count("warp.seed");
    const int batch = static_cast<int>(config.get_int("warp.batch"));
    warp::TpsEstimator estimator(h, w, seed);
    const auto samples = warp::translated_rectangles(static_cast<int>(config.get_count("warp.train_samples")), h, w,
                                                     static_cast<int>(config.get_count("warp.max_shift")), seed);
    const auto losses = estimator.fit(samples, static_cast<int>(config.get_count("warp.train_steps")), batch,
                                      config.get_real("warp.learning_rate"), seed);
    if (!losses.empty()) log << "estimator: final loss " << losses.back() << "\n";

    const auto theta = estimator.estimate(garment, pose, person);
    Image warped = warp::tps_transform(garment, theta);
    if (const auto steps = config.get_count("warp.refine_steps"); steps > 0) {
        warp::WarpRefiner refiner(seed);
        const auto refine_samples = warp::jittered_garments(static_cast<int>(config.get_count("warp.refine_samples")),
                                                            h, w, 0.05, seed);
        refiner.fit(refine_samples, static_cast<int>(steps), batch, 1e-3, seed);
        warped = refiner.refine(warped, pose, person);
    }
    const metrics::SobelEdges edges;
    const auto sketch = warp::sketch_from_warp(warped, edges, config.get_real("warp.sketch_threshold"));

    io::write_png(run.output("warped.png"), warped);
    io::write_png(run.output("sketch.png"), sketch);
    json t{{"grid", theta.grid}, {"theta", json::array()}};
    for (const auto& p : theta.theta) t["theta"].push_back({p[0], p[1]});
    io::write_text(run.output("theta.json"), t.dump() + "\n");
    const auto shift = warp::mean_translation_px(theta, h, w);
    log << "mean displacement " << shift[0] << ", " << shift[1] << " px\n";
}

void cmd_annotate_extract(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"annotate.corpus"});
    run.input(config.get("annotate.corpus"));
    annot::Lexicon lexicon = annot::Lexicon::builtin();
    if (!config.get("annotate.lexicon").empty()) {
        require_paths(config, {"annotate.lexicon"});
        lexicon = annot::Lexicon::load(config.get("annotate.lexicon"));
        run.input(config.get("annotate.lexicon"));
    }
    auto in = open_input(config.get("annotate.corpus"));
    const auto captions = annot::read_corpus(in);
    const annot::SuffixLemmatizer lemmatizer(lexicon);
    const annot::LexiconChunker chunker(lexicon);
    const auto table = annot::extract_noun_chunks(captions, lemmatizer, chunker);
    std::ofstream out(run.output("chunks.jsonl"));
    annot::write_chunk_table(out, table);
    if (!out) throw RuntimeFailure("cannot write chunks.jsonl");
    log << table.size() << " noun chunks from " << captions.size() << " captions\n";
}

std::vector<service::WorkItem> load_items(const RunConfig& config) {
    const fs::path path = config.get("annotate.items");
    auto in = open_input(path);
    auto items = service::read_items(in);
    for (auto& it : items) {
        it.garment_path = resolve_against(path, it.garment_path).string();
        it.model_path = resolve_against(path, it.model_path).string();
    }
    return items;
}

void cmd_annotate_rank(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"annotate.items", "annotate.chunks"});
    run.input(config.get("annotate.items"));
    run.input(config.get("annotate.chunks"));
    const auto items = load_items(config);
    auto chunk_in = open_input(config.get("annotate.chunks"));
    const auto table = annot::read_chunk_table(chunk_in);

    annot::RankOptions options;
    options.k_per_model = static_cast<int>(config.get_int("annotate.k_per_model"));
    options.target = static_cast<int>(config.get_int("annotate.target"));
    const metrics::ToyClipEmbedder clip;
    const std::vector<const metrics::EmbeddingExtractor*> models{&clip};

    std::vector<std::string> missing;
    for (const auto& it : items) {
        if (!fs::exists(it.garment_path)) missing.push_back(it.item_id + ": " + it.garment_path);
    }
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }

    std::vector<annot::CandidateRecord> records;
    for (const auto& it : items) {
        std::vector<std::string> pool;
        for (const auto& c : table) {
            if (c.category == it.category) pool.push_back(c.text);
        }
        try {
            records.push_back({it.item_id, annot::rank_candidates(io::read_image(it.garment_path), pool, models,
                                                                  annot::PromptTemplateSet::standard(), options)});
        } catch (const InputError& e) {
            throw InputError(it.item_id + " (" + annot::to_string(it.category) + "): " + e.what());
        }
    }
    std::ofstream out(run.output("candidates.jsonl"));
    annot::write_candidates(out, records);
    if (!out) throw RuntimeFailure("cannot write candidates.jsonl");
    log << records.size() << " items ranked\n";
}

// Synthetic inputs for every other command.
void cmd_synth(const RunConfig& config, RunDir& run, std::ostream& log) {
    const int n = static_cast<int>(config.get_count("data.images"));
    require(n >= 1, "key 'data.images' must be >= 1 for synth");
    const auto samples = synthetic::make_garment_set(n, config.height(), config.width(), config.get_count("data.seed"));
    const fs::path dir = run.dir();
    for (const char* sub : {"bundles", "eval/original", "eval/masks", "eval/keypoints", "annotate/garments",
                            "annotate/models", "warp", "study/images"}) {
        fs::create_directories(dir / sub);
    }
    std::string manifest, corpus, items, pairs;
    for (const auto& s : samples) {
        write_bundle(dir / "bundles" / s.id, pipeline::from_sample(s));
        io::write_png(dir / "eval/original" / (s.id + ".png"), s.image);
        io::write_png(dir / "eval/masks" / (s.id + ".png"), s.inpaint_mask);
        io::write_text(dir / "eval/keypoints" / (s.id + ".json"), cond::keypoints_to_json(s.keypoints) + "\n");
        manifest += json_line({{"id", s.id},
                               {"text", s.text},
                               {"mask_path", "masks/" + s.id + ".png"},
                               {"keypoints_path", "keypoints/" + s.id + ".json"}});
        io::write_png(dir / "annotate/garments" / (s.id + ".png"), s.garment);
        io::write_png(dir / "annotate/models" / (s.id + ".png"), s.image);
        items += json_line({{"item_id", s.id},
                            {"garment", "garments/" + s.id + ".png"},
                            {"model", "models/" + s.id + ".png"},
                            {"category", s.category}});
        // Placeholder systems for exercising the study server: the original
        // figure against a copy with the garment region blanked.
        const std::string a = "images/" + s.id + "_a.png", b = "images/" + s.id + "_b.png";
        io::write_png(dir / "study" / a, s.image);
        io::write_png(dir / "study" / b, cond::mask_image(s.image, s.inpaint_mask));
        pairs += json_line({{"pair_id", s.id + "-r"}, {"mode", "realism"}, {"image_a", a}, {"image_b", b},
                            {"system_a", "ours"}, {"system_b", "baseline"}});
        pairs += json_line({{"pair_id", s.id + "-c"}, {"mode", "coherence"}, {"image_a", a}, {"image_b", b},
                            {"system_a", "ours"}, {"system_b", "baseline"}, {"chunks", {s.text}},
                            {"model_image", "../annotate/models/" + s.id + ".png"},
                            {"sketch", "../bundles/" + s.id + "/sketch.png"}});
    }
    io::write_text(dir / "study/pairs.jsonl", pairs);
    const int captions = static_cast<int>(config.get_count("synth.captions"));
    for (int i = 0; i < captions; ++i) {
        const auto s = synthetic::make_sample(i, config.height(), config.width(), config.get_count("data.seed"));
        corpus += json_line({{"caption", s.caption}, {"category", s.category}});
    }
    io::write_text(dir / "eval/manifest.jsonl", manifest);
    io::write_text(dir / "annotate/corpus.jsonl", corpus);
    io::write_text(dir / "annotate/items.jsonl", items);
    const auto& first = samples.front();
    io::write_png(dir / "warp/garment.png", first.garment);
    io::write_png(dir / "warp/masked_person.png", cond::mask_image(first.image, first.inpaint_mask));
    io::write_text(dir / "warp/keypoints.json", cond::keypoints_to_json(first.keypoints) + "\n");
    for (const char* out : {"bundles", "eval", "annotate", "warp", "study"}) run.output(out);
    log << n << " synthetic samples under " << dir.string() << "\n";
}

// Blocks SIGINT/SIGTERM in every thread and stops the server from a sigwait
// thread, so the server shuts down cleanly.
void serve_until_signal(service::Server& server, const std::string& host, RunDir& run, std::ostream& log) {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    const int port = server.bind();
    run.finish();
    log << "listening on http://" << host << ":" << port << std::endl;
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        server.stop();
    });
    server.run();
    pthread_kill(waiter.native_handle(), SIGTERM);  // no-op if it already returned
    waiter.join();
    log << "stopped" << std::endl;
}

service::ServerConfig server_config(const RunConfig& config) {
    service::ServerConfig sc;
    sc.host = config.get("server.host");
    sc.port = static_cast<int>(config.get_int("server.port"));
    sc.static_dir = config.get("server.static_dir");
    if (!sc.static_dir.empty()) require_paths(config, {"server.static_dir"});
    if (sc.port < 0 || sc.port > 65535) throw ConfigError("key 'server.port' must lie in [0, 65535]");
    return sc;
}

void cmd_annotate_serve(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"annotate.items", "annotate.candidates"});
    run.input(config.get("annotate.items"));
    run.input(config.get("annotate.candidates"));
    const auto sc = server_config(config);
    auto items = load_items(config);
    auto cand_in = open_input(config.get("annotate.candidates"));
    const auto candidates = service::candidate_map(annot::read_candidates(cand_in));
    const fs::path journal = config.get("annotate.journal").empty() ? run.dir() / "annotations.jsonl"
                                                                    : fs::path(config.get("annotate.journal"));
    const auto lease = config.get_int("annotate.lease_seconds");
    if (lease <= 0) throw ConfigError("key 'annotate.lease_seconds' must be positive");
    service::AnnotationStore store(std::move(items), candidates, journal, service::system_clock(),
                                   std::chrono::seconds(lease));
    const auto p = store.progress();
    log << p.total << " items, " << p.done << " already annotated; journal " << journal.string() << "\n";
    service::Server server(sc, &store, nullptr);
    serve_until_signal(server, sc.host, run, log);
}

void cmd_study_serve(const RunConfig& config, RunDir& run, std::ostream& log) {
    require_paths(config, {"study.pairs"});
    const fs::path path = config.get("study.pairs");
    run.input(path);
    const auto sc = server_config(config);
    auto in = open_input(path);
    auto pairs = service::read_pairs(in);
    std::vector<std::string> missing;
    for (auto& p : pairs) {
        for (std::string* s : {&p.image_a, &p.image_b, &p.model_image, &p.sketch, &p.pose}) {
            if (s->empty()) continue;
            *s = resolve_against(path, *s).string();
            if (!fs::exists(*s)) missing.push_back(p.pair_id + ": " + *s);
        }
    }
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }
    const fs::path journal =
        config.get("study.journal").empty() ? run.dir() / "votes.jsonl" : fs::path(config.get("study.journal"));
    service::StudyStore store(std::move(pairs), journal, config.get_count("study.seed"));
    log << store.vote_count() << " votes replayed; journal " << journal.string() << "\n";
    service::Server server(sc, nullptr, &store);
    serve_until_signal(server, sc.host, run, log);
}

}  // namespace

// --------------------------------------------------------------------- config

const std::vector<KeySpec>& key_specs() { return kKeys; }

std::vector<std::pair<std::string, std::string>> parse_config(const std::string& text, const std::string& origin) {
    static const std::regex key_re("[a-z][a-z0-9_]*(\\.[a-z][a-z0-9_]*)*");
    std::vector<std::pair<std::string, std::string>> out;
    std::set<std::string> seen;
    std::istringstream in(text);
    int line_no = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const std::string where = origin + ":" + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        if (!std::regex_match(key, key_re)) throw ConfigError(where + ": malformed key '" + key + "'");
        std::string rest = trim(std::string_view(line).substr(eq + 1));
        std::string value;
        if (!rest.empty() && rest[0] == '"') {
            std::size_t i = 1;
            bool closed = false;
            for (; i < rest.size(); ++i) {
                if (rest[i] == '\\' && i + 1 < rest.size()) {
                    const char next = rest[++i];
                    value += next == 'n' ? '\n' : next;
                } else if (rest[i] == '"') {
                    closed = true;
                    break;
                } else {
                    value += rest[i];
                }
            }
            if (!closed) throw ConfigError(where + ": unterminated quote in value of '" + key + "'");
            const std::string tail = trim(std::string_view(rest).substr(i + 1));
            if (!tail.empty() && tail[0] != '#') throw ConfigError(where + ": text after quoted value of '" + key + "'");
        } else {
            // An unquoted '#' starts a comment when it follows whitespace.
            std::size_t cut = rest.size();
            for (std::size_t i = 1; i < rest.size(); ++i) {
                if (rest[i] == '#' && (rest[i - 1] == ' ' || rest[i - 1] == '\t')) {
                    cut = i;
                    break;
                }
            }
            if (!rest.empty() && rest[0] == '#') cut = 0;
            value = trim(std::string_view(rest).substr(0, cut));
        }
        if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
        out.emplace_back(key, value);
    }
    return out;
}

RunConfig::RunConfig() {
    for (const auto& k : kKeys) values_[k.key] = k.default_value;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
    for (const auto& [k, v] : parse_config(text, origin)) set(k, v, origin);
}

void RunConfig::merge_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& origin) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError(origin + ": unknown config key '" + key + "'");
    check_value(*spec, value, origin);
    values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
    long long v = 0;
    if (!parse_int(get(key), v)) throw ConfigError("key '" + key + "' is not an integer");
    return v;
}

std::uint64_t RunConfig::get_count(const std::string& key) const {
    std::uint64_t v = 0;
    if (!parse_count(get(key), v)) throw ConfigError("key '" + key + "' is not a non-negative integer");
    return v;
}

double RunConfig::get_real(const std::string& key) const {
    double v = 0.0;
    if (!parse_real(get(key), v)) throw ConfigError("key '" + key + "' is not a number");
    return v;
}

bool RunConfig::get_bool(const std::string& key) const {
    bool v = false;
    if (!parse_bool(get(key), v)) throw ConfigError("key '" + key + "' is not a boolean");
    return v;
}

std::string RunConfig::snapshot() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + quote_if_needed(v) + "\n";
    return out;
}

std::string RunConfig::fingerprint() const {
    RunConfig copy = *this;
    copy.values_.erase("run.dir");
    return hex16(fnv1a(copy.snapshot()));
}

int RunConfig::height() const { return static_cast<int>(get_int("image.height")); }
int RunConfig::width() const { return static_cast<int>(get_int("image.width")); }

void RunConfig::validate() const {
    const int h = height(), w = width();
    if (h <= 0 || h % 8 != 0) throw ConfigError("key 'image.height' must be a positive multiple of 8, got " + get("image.height"));
    if (w <= 0 || w % 8 != 0) throw ConfigError("key 'image.width' must be a positive multiple of 8, got " + get("image.width"));
    // Component validators do not know key names; prefix the group.
    const auto checked = [](const char* keys, const auto& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("keys '") + keys + "': " + e.what());
        }
    };
    checked("guidance.*", [&] { guidance().validate(); });
    checked("train.*", [&] { training().validate(); });
    checked("model.*", [&] { denoiser().validate(); });
    checked("codec.*", [&] { codec::validate(codec()); });
    if (get_int("schedule.steps") < 1) throw ConfigError("key 'schedule.steps' must be >= 1");
    const double b0 = get_real("schedule.beta_start"), b1 = get_real("schedule.beta_end");
    if (!(b0 > 0.0 && b0 <= b1 && b1 < 1.0)) throw ConfigError("keys 'schedule.beta_start'/'schedule.beta_end' need 0 < start <= end < 1");
    if (!(get_real("pipeline.latent_scale") > 0.0)) throw ConfigError("key 'pipeline.latent_scale' must be positive");
    if (!(get_real("pipeline.pose_sigma") > 0.0)) throw ConfigError("key 'pipeline.pose_sigma' must be positive");
    if (get_int("text.max_tokens") < 1) throw ConfigError("key 'text.max_tokens' must be >= 1");
    if (get_int("warp.batch") < 1) throw ConfigError("key 'warp.batch' must be >= 1");
    if (get_int("annotate.k_per_model") < 1 || get_int("annotate.target") < 1) {
        throw ConfigError("keys 'annotate.k_per_model' and 'annotate.target' must be >= 1");
    }
}

diffusion::GuidanceSpec RunConfig::guidance() const {
    diffusion::GuidanceSpec g;
    g.alpha = get_real("guidance.alpha");
    g.steps = static_cast<int>(get_int("guidance.steps"));
    g.sketch_fraction = get_real("guidance.sketch_fraction");
    return g;
}

diffusion::TrainingConfig RunConfig::training() const {
    diffusion::TrainingConfig t;
    t.p_uncond = get_real("train.p_uncond");
    t.learning_rate = get_real("train.learning_rate");
    t.batch = static_cast<int>(get_int("train.batch"));
    t.steps = static_cast<int>(get_count("train.steps"));
    t.seed = get_count("train.seed");
    return t;
}

diffusion::NoiseSchedule RunConfig::schedule() const {
    return diffusion::NoiseSchedule(static_cast<int>(get_int("schedule.steps")), get_real("schedule.beta_start"),
                                    get_real("schedule.beta_end"));
}

denoiser::DenoiserConfig RunConfig::denoiser() const {
    denoiser::DenoiserConfig d;
    d.in_channels = static_cast<int>(get_int("model.in_channels"));
    d.base_width = static_cast<int>(get_int("model.base_width"));
    d.levels = static_cast<int>(get_int("model.levels"));
    d.time_dim = static_cast<int>(get_int("model.time_dim"));
    d.text_dim = static_cast<int>(get_int("model.text_dim"));
    d.seed = get_count("model.seed");
    return d;
}

codec::CodecConfig RunConfig::codec() const {
    codec::CodecConfig c;
    c.kind = get("codec.kind") == "trainable" ? codec::CodecKind::trainable : codec::CodecKind::reference;
    c.seed = get_count("codec.seed");
    return c;
}

pipeline::PipelineConfig RunConfig::pipeline() const {
    pipeline::PipelineConfig p;
    p.latent_scale = get_real("pipeline.latent_scale");
    p.pose_sigma = get_real("pipeline.pose_sigma");
    return p;
}

// ------------------------------------------------------------------- bundles

pipeline::EditInputs read_bundle(const fs::path& dir) {
    static const char* kFiles[] = {"image.png", "mask.png", "head_mask.png", "keypoints.json", "sketch.png", "text.txt"};
    std::vector<std::string> missing;
    for (const char* f : kFiles) {
        if (!fs::exists(dir / f)) missing.push_back((dir / f).string());
    }
    if (!missing.empty()) {
        std::string msg = "missing inputs in bundle " + dir.string() + ":";
        for (const auto& m : missing) msg += "\n  " + m;
        throw InputError(msg);
    }
    pipeline::EditInputs in;
    in.image = io::read_image(dir / "image.png");
    in.mask = InpaintMask(io::read_mask(dir / "mask.png"));
    in.head_mask = HeadMask(io::read_mask(dir / "head_mask.png"));
    in.keypoints = cond::keypoints_from_json(io::read_text(dir / "keypoints.json"));
    in.sketch = io::read_sketch(dir / "sketch.png");
    in.text = trim(io::read_text(dir / "text.txt"));
    while (!in.text.empty() && (in.text.back() == '\n' || in.text.back() == '\r')) in.text.pop_back();
    const int h = in.image.height(), w = in.image.width();
    for (const Tensor3* t : {static_cast<const Tensor3*>(&in.mask), static_cast<const Tensor3*>(&in.head_mask),
                             static_cast<const Tensor3*>(&in.sketch)}) {
        require(t->height() == h && t->width() == w,
                "bundle " + dir.string() + ": map " + t->shape_string() + " does not match image " + in.image.shape_string());
    }
    in.keypoints.validate(h, w);
    return in;
}

void write_bundle(const fs::path& dir, const pipeline::EditInputs& in) {
    fs::create_directories(dir);
    io::write_png(dir / "image.png", in.image);
    io::write_png(dir / "mask.png", in.mask);
    io::write_png(dir / "head_mask.png", in.head_mask);
    io::write_text(dir / "keypoints.json", cond::keypoints_to_json(in.keypoints) + "\n");
    io::write_png(dir / "sketch.png", in.sketch);
    io::write_text(dir / "text.txt", in.text + "\n");
}

// ------------------------------------------------------------------ dispatch

const std::vector<std::string>& commands() {
    static const std::vector<std::string> kCommands = {"train",           "sample",        "evaluate",
                                                       "warp",            "annotate-extract", "annotate-rank",
                                                       "annotate-serve", "study-serve",   "synth"};
    return kCommands;
}

std::string version() { return MGD_VERSION; }

fs::path run_command(const std::string& command, const RunConfig& config, std::ostream& log) {
    using Fn = void (*)(const RunConfig&, RunDir&, std::ostream&);
    static const std::map<std::string, Fn> kTable = {
        {"train", cmd_train},
        {"sample", cmd_sample},
        {"evaluate", cmd_evaluate},
        {"warp", cmd_warp},
        {"annotate-extract", cmd_annotate_extract},
        {"annotate-rank", cmd_annotate_rank},
        {"annotate-serve", cmd_annotate_serve},
        {"study-serve", cmd_study_serve},
        {"synth", cmd_synth},
    };
    const auto it = kTable.find(command);
    if (it == kTable.end()) throw ConfigError("unknown command '" + command + "'");
    config.validate();
    RunDir run(command, config);
    it->second(config, run, log);
    run.finish();
    return run.dir();
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const InputError*>(&e)) return 3;
    return 4;
}

}  // namespace mgd::cli

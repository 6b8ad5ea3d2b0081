// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mgd/annotation.hpp"
#include "mgd/cli.hpp"
#include "mgd/error.hpp"
#include "mgd/io.hpp"
#include "mgd/rng.hpp"
#include "testing.hpp"

using namespace mgd;
using namespace mgd::cli;
using mgd::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough that a train/sample round trip takes well under a second.
RunConfig tiny(const fs::path& run_dir) {
    RunConfig c;
    c.set("run.dir", run_dir.string());
    c.set("image.height", "32");
    c.set("image.width", "24");
    c.set("data.images", "8");
    c.set("model.base_width", "8");
    c.set("model.time_dim", "8");
    c.set("model.text_dim", "16");
    c.set("text.max_tokens", "8");
    c.set("train.steps", "20");
    c.set("train.batch", "2");
    c.set("guidance.steps", "10");
    return c;
}

std::string read(const fs::path& p) { return io::read_text(p); }

std::vector<json> read_jsonl(const fs::path& p) {
    std::vector<json> out;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

template <typename E>
std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const E& e) {
        return e.what();
    }
    FAIL("expected exception");
    return {};
}

}  // namespace

TEST_CASE("config grammar: comments, quoting and empty values") {
    const auto entries = parse_config(
        "# header\n"
        "\n"
        "  image.height = 32   # trailing comment\n"
        "sample.text = \"red # not a comment\"\n"
        "server.static_dir =\n"
        "sample.checkpoint = runs/a#b\n"
        "annotate.journal = \"  spaced \\\"q\\\" \\\\ \"  # ok\n"
        "image.width=24\r\n");
    REQUIRE(entries.size() == 6);
    CHECK(entries[0] == std::pair<std::string, std::string>{"image.height", "32"});
    CHECK(entries[1].second == "red # not a comment");
    CHECK(entries[2].second.empty());
    CHECK(entries[3].second == "runs/a#b");  // '#' not preceded by a blank
    CHECK(entries[4].second == "  spaced \"q\" \\ ");
    CHECK(entries[5] == std::pair<std::string, std::string>{"image.width", "24"});
}

TEST_CASE("config grammar errors name the line and key") {
    CHECK(message_of<ConfigError>([] { parse_config("a.b = 1\nnot an entry\n", "f.conf"); }).find("f.conf:2") !=
          std::string::npos);
    CHECK(message_of<ConfigError>([] { parse_config("Image.Height = 1\n"); }).find("Image.Height") != std::string::npos);
    CHECK(message_of<ConfigError>([] { parse_config("a = 1\na = 2\n"); }).find("duplicate key 'a'") != std::string::npos);
    CHECK_THROWS_AS(parse_config("a = \"open\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("a = \"x\" y\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("a. = 1\n"), ConfigError);
}

TEST_CASE("unknown keys and bad values are config errors naming the key") {
    RunConfig c;
    CHECK(message_of<ConfigError>([&] { c.merge_text("guidance.alfa = 2\n", "x.conf"); }).find("guidance.alfa") !=
          std::string::npos);
    CHECK(message_of<ConfigError>([&] { c.set("guidance.steps", "ten"); }).find("guidance.steps") != std::string::npos);
    CHECK_THROWS_AS(c.set("train.seed", "-1"), ConfigError);
    CHECK_THROWS_AS(c.set("guidance.alpha", "nan"), ConfigError);
    CHECK_THROWS_AS(c.set("codec.kind", "vae"), ConfigError);
    CHECK_THROWS_AS(c.set_assignment("no-equals-sign"), ConfigError);
    c.set("codec.kind", "trainable");
    c.set("sample.trace", "off");
    CHECK_FALSE(c.get_bool("sample.trace"));
}

TEST_CASE("defaults carry the documented toy values") {
    const RunConfig c;
    CHECK(c.guidance().alpha == 7.5);
    CHECK(c.guidance().steps == 50);
    CHECK(c.guidance().sketch_fraction == 0.2);
    CHECK(c.training().p_uncond == 0.2);
    CHECK(c.height() % 8 == 0);
    CHECK(c.width() % 8 == 0);
    CHECK(c.pipeline().latent_scale == 0.125);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("flags override files, files override defaults") {
    RunConfig c;
    c.merge_text("guidance.alpha = 3\nguidance.steps = 20\n", "a.conf");
    c.merge_text("guidance.alpha = 4\n", "b.conf");
    c.set_assignment("guidance.steps=30");
    CHECK(c.guidance().alpha == 4.0);
    CHECK(c.guidance().steps == 30);
    CHECK(c.guidance().sketch_fraction == 0.2);
}

TEST_CASE("snapshot round-trips and the fingerprint ignores run.dir") {
    RunConfig c;
    c.set("sample.text", "blue # striped");
    c.set("server.static_dir", " odd path ");
    c.set("train.learning_rate", "2e-4");
    RunConfig back;
    back.merge_text(c.snapshot(), "snapshot");
    CHECK(back.snapshot() == c.snapshot());
    CHECK(back.fingerprint() == c.fingerprint());

    RunConfig moved = c;
    moved.set("run.dir", "elsewhere");
    CHECK(moved.fingerprint() == c.fingerprint());
    moved.set("train.seed", "99");
    CHECK(moved.fingerprint() != c.fingerprint());
    CHECK(c.fingerprint().size() == 16);
}

TEST_CASE("cross-key validation") {
    RunConfig c;
    c.set("image.height", "60");
    CHECK(message_of<ConfigError>([&] { c.validate(); }).find("image.height") != std::string::npos);
    RunConfig g;
    g.set("guidance.sketch_fraction", "1.5");
    CHECK(message_of<ConfigError>([&] { g.validate(); }).find("guidance") != std::string::npos);
    RunConfig m;
    m.set("model.in_channels", "12");
    CHECK(message_of<ConfigError>([&] { m.validate(); }).find("model") != std::string::npos);
}

TEST_CASE("exit codes") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(InputError("x")) == 3);
    CHECK(exit_code_for(RuntimeFailure("x")) == 4);
    CHECK(exit_code_for(std::runtime_error("x")) == 4);
    std::ostringstream log;
    CHECK_THROWS_AS(run_command("fly", RunConfig{}, log), ConfigError);
}

TEST_CASE("missing inputs are enumerated together") {
    TempDir tmp;
    std::ostringstream log;
    RunConfig c;
    c.set("run.dir", (tmp.path / "ev").string());
    c.set("eval.generated_dir", (tmp.path / "nowhere").string());
    const auto msg = message_of<InputError>([&] { run_command("evaluate", c, log); });
    CHECK(msg.find("eval.original_dir (not set)") != std::string::npos);
    CHECK(msg.find("eval.generated_dir = ") != std::string::npos);
    CHECK(msg.find("(not found)") != std::string::npos);
    CHECK(msg.find("eval.manifest (not set)") != std::string::npos);

    fs::create_directories(tmp.path / "partial");
    io::write_text(tmp.path / "partial" / "text.txt", "red shirt\n");
    const auto bundle_msg = message_of<InputError>([&] { read_bundle(tmp.path / "partial"); });
    for (const char* f : {"image.png", "mask.png", "head_mask.png", "keypoints.json", "sketch.png"}) {
        CHECK(bundle_msg.find(f) != std::string::npos);
    }
    CHECK(bundle_msg.find("text.txt") == std::string::npos);
}

TEST_CASE("bundle write/read round trip") {
    TempDir tmp;
    const auto sample = synthetic::make_sample(3, 32, 24, 5);
    const auto in = pipeline::from_sample(sample);
    write_bundle(tmp.path / "b", in);
    const auto back = read_bundle(tmp.path / "b");
    CHECK(max_abs_diff(back.image, in.image) <= 0.5 / 255.0 + 1e-12);
    CHECK(back.mask == in.mask);
    CHECK(back.head_mask == in.head_mask);
    CHECK(back.sketch == in.sketch);
    CHECK(back.text == in.text);
    for (int k = 0; k < cond::kNumKeypoints; ++k) {
        CHECK(back.keypoints[k].x == doctest::Approx(in.keypoints[k].x));
        CHECK(back.keypoints[k].confidence == doctest::Approx(in.keypoints[k].confidence));
    }
}

TEST_CASE("train and sample: run directory, determinism, snapshot rerun") {
    TempDir tmp;
    std::ostringstream log;

    const auto t1 = run_command("train", tiny(tmp.path / "t1"), log);
    const auto t2 = run_command("train", tiny(tmp.path / "t2"), log);
    CHECK(read(t1 / "checkpoint.bin") == read(t2 / "checkpoint.bin"));
    CHECK(read(t1 / "manifest.json") == read(t2 / "manifest.json"));
    CHECK(read_jsonl(t1 / "losses.jsonl").size() == 20);
    CHECK(read(t1 / "VERSION") == version() + "\n");

    // Manifest digests match the files on disk.
    const auto manifest = json::parse(read(t1 / "manifest.json"));
    CHECK(manifest.at("command") == "train");
    std::set<std::string> outputs;
    for (const auto& o : manifest.at("outputs")) {
        outputs.insert(o.at("path").get<std::string>());
        const std::string bytes = read(t1 / o.at("path").get<std::string>());
        CHECK(o.at("bytes").get<std::size_t>() == bytes.size());
    }
    CHECK(outputs == std::set<std::string>{"checkpoint.bin", "losses.jsonl"});

    // Different seed, different weights.
    auto other = tiny(tmp.path / "t3");
    other.set("train.seed", "4");
    CHECK(read(run_command("train", other, log) / "checkpoint.bin") != read(t1 / "checkpoint.bin"));

    auto sc = tiny(tmp.path / "s1");
    sc.set("sample.checkpoint", (t1 / "checkpoint.bin").string());
    const auto s1 = run_command("sample", sc, log);
    sc.set("run.dir", (tmp.path / "s2").string());
    sc.set("sample.checkpoint", (t2 / "checkpoint.bin").string());
    const auto s2 = run_command("sample", sc, log);
    CHECK(read(s1 / "output.png") == read(s2 / "output.png"));

    const auto trace = read_jsonl(s1 / "trace.jsonl");
    REQUIRE(trace.size() == 10);
    int active = 0;
    for (const auto& r : trace) active += r.at("sketch_active").get<bool>() ? 1 : 0;
    CHECK(active == 2);
    CHECK(trace.front().at("sketch_active").get<bool>());

    const Image out = io::read_image(s1 / "output.png");
    CHECK(out.height() == 32);
    CHECK(out.width() == 24);

    // Rerun from the snapshot alone.
    RunConfig snap;
    snap.merge_file(s1 / "config.txt");
    snap.set("run.dir", (tmp.path / "s3").string());
    CHECK(read(run_command("sample", snap, log) / "output.png") == read(s1 / "output.png"));

    // A different noise seed changes the image.
    snap.set("run.dir", (tmp.path / "s4").string());
    snap.set("sample.seed", "1");
    CHECK(read(run_command("sample", snap, log) / "output.png") != read(s1 / "output.png"));
}

TEST_CASE("sample reads an inference bundle and keeps the head region") {
    TempDir tmp;
    std::ostringstream log;
    const auto t = run_command("train", tiny(tmp.path / "t"), log);
    const auto in = pipeline::from_sample(synthetic::make_sample(5, 32, 24, 11));
    write_bundle(tmp.path / "bundle", in);
    auto c = tiny(tmp.path / "s");
    c.set("sample.checkpoint", (t / "checkpoint.bin").string());
    c.set("sample.input", (tmp.path / "bundle").string());
    const auto s = run_command("sample", c, log);
    const Image out = io::read_image(s / "output.png");
    const Image original = io::read_image(tmp.path / "bundle" / "image.png");
    REQUIRE(in.head_mask.count() > 0);
    for (int y = 0; y < out.height(); ++y) {
        for (int x = 0; x < out.width(); ++x) {
            if (!in.head_mask.is_set(y, x)) continue;
            for (int ch = 0; ch < 3; ++ch) CHECK(out.at(y, x, ch) == original.at(y, x, ch));
        }
    }
    const auto manifest = json::parse(read(s / "manifest.json"));
    CHECK(manifest.at("inputs").size() == 2);
}

TEST_CASE("trainable codec weights travel from train to sample") {
    TempDir tmp;
    std::ostringstream log;
    auto c = tiny(tmp.path / "t");
    c.set("codec.kind", "trainable");
    c.set("codec.fit_steps", "5");
    c.set("train.steps", "3");
    const auto t = run_command("train", c, log);
    REQUIRE(fs::exists(t / "codec.bin"));

    c.set("run.dir", (tmp.path / "s").string());
    c.set("sample.checkpoint", (t / "checkpoint.bin").string());
    c.set("guidance.steps", "2");
    CHECK_THROWS_AS(run_command("sample", c, log), InputError);  // codec.checkpoint not set
    c.set("codec.checkpoint", (t / "codec.bin").string());
    CHECK(fs::exists(run_command("sample", c, log) / "output.png"));

    io::write_text(tmp.path / "bad.bin", "MGDCODEC");
    c.set("codec.checkpoint", (tmp.path / "bad.bin").string());
    CHECK_THROWS_AS(run_command("sample", c, log), InputError);
}

TEST_CASE("synth feeds evaluate; identical directories score zero") {
    TempDir tmp;
    std::ostringstream log;
    auto c = tiny(tmp.path / "syn");
    c.set("data.images", "12");
    c.set("synth.captions", "40");
    const auto syn = run_command("synth", c, log);
    CHECK(read_jsonl(syn / "eval" / "manifest.jsonl").size() == 12);
    CHECK(read_jsonl(syn / "annotate" / "corpus.jsonl").size() == 40);
    CHECK(read_jsonl(syn / "study" / "pairs.jsonl").size() == 24);

    RunConfig e;
    e.set("run.dir", (tmp.path / "ev").string());
    e.set("eval.original_dir", (syn / "eval" / "original").string());
    e.set("eval.generated_dir", (syn / "eval" / "original").string());
    e.set("eval.manifest", (syn / "eval" / "manifest.jsonl").string());
    const auto ev = run_command("evaluate", e, log);
    const auto report = json::parse(read(ev / "metrics.json"));
    CHECK(report.at("pd").get<double>() == 0.0);
    CHECK(report.at("sd").get<double>() == 0.0);
    CHECK(std::abs(report.at("fid").get<double>()) < 1e-6);
    CHECK(report.at("samples").get<int>() == 12);

    // One generated image missing: listed by id.
    fs::create_directories(tmp.path / "gen");
    for (const auto& entry : fs::directory_iterator(syn / "eval" / "original")) {
        if (entry.path().filename() != "item4.png") fs::copy(entry.path(), tmp.path / "gen" / entry.path().filename());
    }
    e.set("eval.generated_dir", (tmp.path / "gen").string());
    e.set("run.dir", (tmp.path / "ev2").string());
    CHECK(message_of<InputError>([&] { run_command("evaluate", e, log); }).find("item4") != std::string::npos);
}

TEST_CASE("annotate-extract then annotate-rank") {
    TempDir tmp;
    std::ostringstream log;
    auto c = tiny(tmp.path / "syn");
    c.set("data.images", "6");
    const auto syn = run_command("synth", c, log);

    RunConfig x;
    x.set("run.dir", (tmp.path / "ax").string());
    x.set("annotate.corpus", (syn / "annotate" / "corpus.jsonl").string());
    const auto ax = run_command("annotate-extract", x, log);
    std::ifstream table_in(ax / "chunks.jsonl");
    const auto table = annot::read_chunk_table(table_in);
    REQUIRE(!table.empty());

    RunConfig r;
    r.set("run.dir", (tmp.path / "ar").string());
    r.set("annotate.items", (syn / "annotate" / "items.jsonl").string());
    r.set("annotate.chunks", (ax / "chunks.jsonl").string());
    const auto ar = run_command("annotate-rank", r, log);
    std::ifstream cand_in(ar / "candidates.jsonl");
    const auto records = annot::read_candidates(cand_in);
    const auto items = read_jsonl(syn / "annotate" / "items.jsonl");
    REQUIRE(records.size() == items.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(records[i].item_id == items[i].at("item_id"));
        const auto category = annot::parse_category(items[i].at("category"));
        CHECK(records[i].candidates.size() == 25);
        CHECK(std::set<std::string>(records[i].candidates.begin(), records[i].candidates.end()).size() == 25);
        for (const auto& cand : records[i].candidates) {
            const bool in_table = std::any_of(table.begin(), table.end(), [&](const annot::NounChunk& n) {
                return n.text == cand && n.category == category;
            });
            CHECK(in_table);
        }
    }

    // Too few chunks for the target: input error naming the item.
    r.set("annotate.target", "500");
    r.set("run.dir", (tmp.path / "ar2").string());
    CHECK(message_of<InputError>([&] { run_command("annotate-rank", r, log); }).find("item0") != std::string::npos);
}

TEST_CASE("warp writes a warped garment and a binary sketch") {
    TempDir tmp;
    std::ostringstream log;
    auto c = tiny(tmp.path / "syn");
    c.set("data.images", "1");
    c.set("synth.captions", "1");
    const auto syn = run_command("synth", c, log);

    RunConfig w;
    w.set("run.dir", (tmp.path / "w").string());
    w.set("warp.garment", (syn / "warp" / "garment.png").string());
    w.set("warp.keypoints", (syn / "warp" / "keypoints.json").string());
    w.set("warp.masked_person", (syn / "warp" / "masked_person.png").string());
    w.set("warp.train_samples", "16");
    w.set("warp.train_steps", "10");
    w.set("warp.refine_steps", "2");
    w.set("warp.refine_samples", "4");
    const auto out = run_command("warp", w, log);
    const Image warped = io::read_image(out / "warped.png");
    const auto sketch = io::read_sketch(out / "sketch.png");
    CHECK(warped.height() == 32);
    CHECK(warped.width() == 24);
    for (double v : sketch.data()) CHECK((v == 0.0 || v == 1.0));
    const auto theta = json::parse(read(out / "theta.json"));
    CHECK(theta.at("theta").size() == 25);

    // Mismatched sizes are an input error.
    io::write_png(tmp.path / "small.png", Image(16, 16, 1.0));
    w.set("warp.masked_person", (tmp.path / "small.png").string());
    w.set("run.dir", (tmp.path / "w2").string());
    CHECK_THROWS_AS(run_command("warp", w, log), InputError);
}

// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Command layer behind tools/mgd: the key-value run configuration and one
// entry point per pipeline stage. See docs/config.md for the file grammar.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mgd/diffusion.hpp"
#include "mgd/latent_codec.hpp"
#include "mgd/pipeline.hpp"

namespace mgd::cli {

enum class KeyType { integer, count, real, boolean, text, path, choice };

struct KeySpec {
    const char* key;
    const char* default_value;
    KeyType type;
    const char* help;
    const char* choices = "";  // '|'-separated, KeyType::choice only
};

// Every recognized key in documentation order.
const std::vector<KeySpec>& key_specs();

// Parsed `key = value` lines in file order. Throws ConfigError naming the line
// and, for bad keys, the key.
std::vector<std::pair<std::string, std::string>> parse_config(const std::string& text,
                                                              const std::string& origin = "config");

// Defaults, then config files, then --set overrides; later layers win.
class RunConfig {
public:
    RunConfig();

    void merge_text(const std::string& text, const std::string& origin);
    void merge_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value, const std::string& origin = "--set");
    void set_assignment(const std::string& assignment);  // "key=value"

    const std::string& get(const std::string& key) const;
    long long get_int(const std::string& key) const;
    std::uint64_t get_count(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    // Every key in sorted order, in the config grammar. Feeding it back
    // through merge_text reproduces this configuration.
    std::string snapshot() const;
    // 16 hex digits over the snapshot without run.dir.
    std::string fingerprint() const;

    // Cross-key checks (image sides divisible by 8, component validators).
    void validate() const;

    int height() const;
    int width() const;
    diffusion::GuidanceSpec guidance() const;
    diffusion::TrainingConfig training() const;
    diffusion::NoiseSchedule schedule() const;
    denoiser::DenoiserConfig denoiser() const;
    codec::CodecConfig codec() const;
    pipeline::PipelineConfig pipeline() const;

private:
    std::map<std::string, std::string> values_;
};

const std::vector<std::string>& commands();

// Runs `command`, writing into the run directory (created if needed), which
// it returns. Errors surface as ConfigError, InputError or RuntimeFailure.
// The serve commands block until SIGINT or SIGTERM.
std::filesystem::path run_command(const std::string& command, const RunConfig& config, std::ostream& log);

// 0 success, 2 config error, 3 input error, 4 runtime failure.
int exit_code_for(const std::exception& e);

std::string version();

// Inference bundle: image.png, mask.png, head_mask.png, keypoints.json,
// sketch.png and text.txt in one directory.
pipeline::EditInputs read_bundle(const std::filesystem::path& dir);
void write_bundle(const std::filesystem::path& dir, const pipeline::EditInputs& inputs);

}  // namespace mgd::cli

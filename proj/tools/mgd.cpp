// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// mgd: one entry point for every pipeline stage.
//
//   mgd <command> [--config FILE]... [--set key=value]... [--run-dir DIR]
//   mgd keys       list every config key with its default

#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "mgd/cli.hpp"
#include "mgd/error.hpp"

namespace {

const char* type_label(mgd::cli::KeyType t) {
    using mgd::cli::KeyType;
    switch (t) {
        case KeyType::integer: return "int";
        case KeyType::count: return "uint";
        case KeyType::real: return "real";
        case KeyType::boolean: return "bool";
        case KeyType::path: return "path";
        case KeyType::choice: return "choice";
        default: return "text";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MGD toolkit: multimodal garment editing with latent diffusion"};
    app.set_version_flag("--version", mgd::cli::version());
    app.require_subcommand(1);

    std::vector<std::string> config_files;
    std::vector<std::string> overrides;
    std::string run_dir;

    struct Entry {
        std::string name;
        CLI::App* sub;
    };
    std::vector<Entry> entries;
    const std::map<std::string, std::string> help = {
        {"train", "train the denoiser on synthetic or bundled data"},
        {"sample", "generate one edit from a checkpoint and an input bundle"},
        {"evaluate", "PD, SD, CLIP-S, FID and KID over two image directories"},
        {"warp", "TPS-warp a garment onto a person and extract its sketch"},
        {"annotate-extract", "build the noun chunk table from a caption corpus"},
        {"annotate-rank", "rank 25 candidate chunks per item"},
        {"annotate-serve", "serve the annotation queue over HTTP"},
        {"study-serve", "serve the blind user study over HTTP"},
        {"synth", "write synthetic inputs for the other commands"},
    };
    for (const auto& name : mgd::cli::commands()) {
        auto* sub = app.add_subcommand(name, help.at(name));
        sub->add_option("-c,--config", config_files, "key = value config file (repeatable; later files win)")
            ->check(CLI::ExistingFile);
        sub->add_option("-s,--set", overrides, "override one key, key=value (repeatable; wins over files)");
        sub->add_option("-o,--run-dir", run_dir, "output directory (same as --set run.dir=DIR)");
        entries.push_back({name, sub});
    }
    auto* keys = app.add_subcommand("keys", "list config keys, defaults and documentation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (keys->parsed()) {
        for (const auto& k : mgd::cli::key_specs()) {
            std::cout << std::left << std::setw(26) << k.key << std::setw(8) << type_label(k.type) << std::setw(12)
                      << (std::string(k.default_value).empty() ? "\"\"" : k.default_value) << k.help;
            if (*k.choices) std::cout << " (" << k.choices << ")";
            std::cout << "\n";
        }
        return 0;
    }

    try {
        mgd::cli::RunConfig config;
        for (const auto& f : config_files) config.merge_file(f);
        for (const auto& s : overrides) config.set_assignment(s);
        if (!run_dir.empty()) config.set("run.dir", run_dir, "--run-dir");
        for (const auto& e : entries) {
            if (!e.sub->parsed()) continue;
            const auto dir = mgd::cli::run_command(e.name, config, std::cerr);
            std::cout << dir.string() << "\n";
        }
        return 0;
    } catch (const std::exception& e) {
        const int code = mgd::cli::exit_code_for(e);
        const char* kind = code == 2 ? "config error" : code == 3 ? "input error" : "runtime failure";
        std::cerr << "mgd: " << kind << ": " << e.what() << "\n";
        return code;
    }
}

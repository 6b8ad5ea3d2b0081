// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "mgd/annotation.hpp"
#include "mgd/rng.hpp"

namespace mgd::service {

using TimePoint = std::chrono::system_clock::time_point;
using Clock = std::function<TimePoint()>;

Clock system_clock();
std::string iso8601(TimePoint t);  // UTC, second resolution

// Rejected request; `code` is a stable machine-readable tag and `status` the
// HTTP status the server answers with.
class RequestError : public std::runtime_error {
public:
    RequestError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}
    int status() const { return status_; }
    const std::string& code() const { return code_; }

private:
    int status_;
    std::string code_;
};

// ---------------------------------------------------------------- annotation

enum class ItemStatus { pending, assigned, done };
std::string to_string(ItemStatus s);

struct WorkItem {
    std::string item_id;
    std::string garment_path;
    std::string model_path;
    annot::Category category = annot::Category::upper;
    ItemStatus status = ItemStatus::pending;
    std::string assigned_to;
    TimePoint assigned_at{};
};

struct Assignment {
    WorkItem item;
    std::vector<std::string> candidates;
    TimePoint lease_expires{};
};

struct Progress {
    int total = 0;
    int pending = 0;
    int assigned = 0;
    int done = 0;
    std::map<std::string, int> per_annotator;  // completed items
};

struct SubmittedAnnotation {
    std::string item_id;
    std::string annotator_id;
    std::vector<std::string> chunks;
    std::string source;  // "selected" | "manual"
};

// Item queue with leases and an append-only JSONL journal of accepted
// records. All mutations take one exclusive lock; reads share it.
class AnnotationStore {
public:
    static constexpr std::chrono::seconds kDefaultLease{600};

    // Every item needs exactly 25 distinct candidates. Records already in the
    // journal are replayed (their items start as done).
    AnnotationStore(std::vector<WorkItem> items, std::map<std::string, std::vector<std::string>> candidates,
                    std::optional<std::filesystem::path> journal, Clock clock = system_clock(),
                    std::chrono::seconds lease = kDefaultLease);

    // The annotator's current live assignment if any, else the oldest pending
    // item; nullopt when drained.
    std::optional<Assignment> next_item(const std::string& annotator_id);
    annot::AnnotationRecord submit(const SubmittedAnnotation& submission);

    Progress progress() const;
    std::string export_jsonl() const;  // accepted records in commit order
    std::optional<WorkItem> item(const std::string& item_id) const;

private:
    void expire_leases(TimePoint now);
    void append(const annot::AnnotationRecord& record);

    mutable std::shared_mutex mutex_;
    std::vector<WorkItem> items_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::vector<std::string>> candidates_;
    std::optional<std::filesystem::path> journal_;
    Clock clock_;
    std::chrono::seconds lease_;
    std::vector<std::string> records_;  // JSON lines
};

std::vector<WorkItem> read_items(std::istream& in);  // {item_id, garment, model, category}
std::map<std::string, std::vector<std::string>> candidate_map(const std::vector<annot::CandidateRecord>& records);

// --------------------------------------------------------------------- study

enum class StudyMode { realism, coherence };
std::string to_string(StudyMode m);
StudyMode parse_mode(const std::string& s);  // throws InputError

struct StudyPair {
    std::string pair_id;
    StudyMode mode = StudyMode::realism;
    std::string image_a, image_b;
    std::string system_a, system_b;  // never sent to clients
    // Coherence mode conditions.
    std::vector<std::string> chunks;
    std::string model_image, sketch, pose;
};

// What a client sees: an opaque serve id and the images in presentation
// order. Image contents are fetched by serve id and slot.
struct ServedPair {
    std::string serve_id;
    StudyMode mode = StudyMode::realism;
    std::vector<std::string> chunks;  // empty in realism mode
    bool has_conditions = false;
};

struct Vote {
    std::string pair_id;
    char choice = 'a';  // 'a' | 'b'
    StudyMode mode = StudyMode::realism;
    std::string voter_id;
    std::string timestamp;
    char left = 'a';  // which image was shown on the left
};

struct SystemTally {
    int wins = 0;
    int total = 0;
    double preference() const;  // wins / total * 100
};

class StudyStore {
public:
    StudyStore(std::vector<StudyPair> pairs, std::optional<std::filesystem::path> journal, std::uint64_t seed,
               Clock clock = system_clock());

    // Among the pairs this voter has not voted on, the one with the fewest
    // votes (ties: file order). Left/right is drawn per serve.
    std::optional<ServedPair> next_pair(StudyMode mode, const std::string& voter_id);
    // `side` is "left" or "right" as seen by the voter.
    Vote submit_vote(const std::string& serve_id, const std::string& side, const std::string& voter_id);

    // Path of an image slot (left, right, model, sketch, pose) of a serve.
    std::optional<std::string> image_path(const std::string& serve_id, const std::string& slot) const;

    // Wins per system, keyed by (system, opponent). "ours" vs "baseline":
    // tally().at({"ours", "baseline"}).preference().
    std::map<std::pair<std::string, std::string>, SystemTally> tally() const;
    std::string export_jsonl() const;
    std::size_t vote_count() const;

private:
    struct Serve {
        std::size_t pair = 0;
        char left = 'a';
        std::string voter_id;
    };
    void append(const Vote& v);

    mutable std::shared_mutex mutex_;
    std::vector<StudyPair> pairs_;
    std::map<std::string, std::size_t> index_;
    std::optional<std::filesystem::path> journal_;
    Rng rng_;
    Clock clock_;
    std::map<std::string, Serve> serves_;
    std::vector<Vote> votes_;
    std::map<std::pair<std::size_t, std::string>, bool> voted_;
    std::vector<int> vote_counts_;
};

std::vector<StudyPair> read_pairs(std::istream& in);
std::string vote_to_json(const Vote& v);

// ---------------------------------------------------------------------- http

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0: pick a free port
    std::string static_dir;  // UI bundle; empty disables static serving
};

// HTTP+JSON front end over the stores (either may be null: its routes then
// answer 404).
class Server {
public:
    Server(ServerConfig config, AnnotationStore* annotations, StudyStore* study);
    ~Server();

    // Binds and returns the port; then run() blocks until stop().
    int bind();
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace mgd::service

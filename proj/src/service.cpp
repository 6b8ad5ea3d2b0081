// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/service.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "mgd/error.hpp"

namespace mgd::service {

using nlohmann::json;

namespace {

std::vector<json> read_jsonl(std::istream& in, const std::string& what) {
    std::vector<json> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw InputError(what + " line " + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

std::vector<json> read_journal(const std::optional<std::filesystem::path>& path, const std::string& what) {
    if (!path || !std::filesystem::exists(*path)) return {};
    std::ifstream in(*path);
    if (!in) throw InputError("cannot read " + what + " journal " + path->string());
    return read_jsonl(in, what + " journal");
}

void append_line(const std::optional<std::filesystem::path>& path, const std::string& line) {
    if (!path) return;
    std::ofstream out(*path, std::ios::app | std::ios::binary);
    out << line << '\n';
    out.flush();
    if (!out) throw RuntimeFailure("cannot append to journal " + path->string());
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

Clock system_clock() {
    return [] { return std::chrono::system_clock::now(); };
}

std::string iso8601(TimePoint t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string to_string(ItemStatus s) {
    switch (s) {
        case ItemStatus::pending: return "pending";
        case ItemStatus::assigned: return "assigned";
        case ItemStatus::done: return "done";
    }
    return "pending";
}

AnnotationStore::AnnotationStore(std::vector<WorkItem> items, std::map<std::string, std::vector<std::string>> candidates,
                                 std::optional<std::filesystem::path> journal, Clock clock, std::chrono::seconds lease)
    : items_(std::move(items)),
      candidates_(std::move(candidates)),
      journal_(std::move(journal)),
      clock_(std::move(clock)),
      lease_(lease) {
    require(lease_.count() > 0, "lease must be positive");
    for (std::size_t i = 0; i < items_.size(); ++i) {
        const auto& it = items_[i];
        require(!it.item_id.empty(), "work item without item_id");
        require(index_.emplace(it.item_id, i).second, "duplicate work item " + it.item_id);
        const auto c = candidates_.find(it.item_id);
        require(c != candidates_.end(), "no candidates for item " + it.item_id);
        const std::set<std::string> distinct(c->second.begin(), c->second.end());
        require(c->second.size() == 25 && distinct.size() == 25,
                "item " + it.item_id + " needs exactly 25 distinct candidates, has " + std::to_string(distinct.size()));
        items_[i].status = ItemStatus::pending;
    }
    for (const auto& j : read_journal(journal_, "annotation")) {
        const auto record = annot::record_from_json(j.dump());
        const auto found = index_.find(record.item_id);
        require(found != index_.end(), "journal refers to unknown item " + record.item_id);
        auto& item = items_[found->second];
        require(item.status != ItemStatus::done, "journal holds two records for item " + record.item_id);
        item.status = ItemStatus::done;
        item.assigned_to = record.annotator_id;
        records_.push_back(annot::record_to_json(record));
    }
}

void AnnotationStore::expire_leases(TimePoint now) {
    for (auto& it : items_) {
        if (it.status == ItemStatus::assigned && now >= it.assigned_at + lease_) {
            it.status = ItemStatus::pending;
            it.assigned_to.clear();
        }
    }
}

std::optional<Assignment> AnnotationStore::next_item(const std::string& annotator_id) {
    if (annotator_id.empty()) throw RequestError(400, "missing_annotator", "annotator_id is required");
    std::unique_lock lock(mutex_);
    const TimePoint now = clock_();
    expire_leases(now);
    WorkItem* chosen = nullptr;
    for (auto& it : items_) {
        if (it.status == ItemStatus::assigned && it.assigned_to == annotator_id) {
            chosen = &it;
            break;
        }
    }
    if (!chosen) {
        for (auto& it : items_) {
            if (it.status == ItemStatus::pending) {
                chosen = &it;
                chosen->status = ItemStatus::assigned;
                chosen->assigned_to = annotator_id;
                chosen->assigned_at = now;
                break;
            }
        }
    }
    if (!chosen) return std::nullopt;
    return Assignment{*chosen, candidates_.at(chosen->item_id), chosen->assigned_at + lease_};
}

annot::AnnotationRecord AnnotationStore::submit(const SubmittedAnnotation& s) {
    if (s.annotator_id.empty()) throw RequestError(400, "missing_annotator", "annotator_id is required");
    if (s.chunks.size() != 3) {
        throw RequestError(400, "count", "exactly 3 noun chunks are required, got " + std::to_string(s.chunks.size()));
    }
    for (const auto& c : s.chunks) {
        if (const auto why = annot::chunk_rejection(c)) {
            throw RequestError(400, "invalid_chunk", "invalid noun chunk '" + c + "': " + *why);
        }
    }
    if (s.chunks[0] == s.chunks[1] || s.chunks[0] == s.chunks[2] || s.chunks[1] == s.chunks[2]) {
        throw RequestError(400, "duplicate_chunk", "noun chunks must be distinct");
    }
    annot::Source source;
    try {
        source = annot::parse_source(s.source);
    } catch (const InputError& e) {
        throw RequestError(400, "invalid_source", e.what());
    }

    std::unique_lock lock(mutex_);
    const auto found = index_.find(s.item_id);
    if (found == index_.end()) throw RequestError(404, "unknown_item", "unknown item " + s.item_id);
    auto& item = items_[found->second];
    const TimePoint now = clock_();
    expire_leases(now);
    if (item.status == ItemStatus::done) throw RequestError(409, "duplicate", "item " + s.item_id + " is already annotated");
    if (item.status != ItemStatus::assigned || item.assigned_to != s.annotator_id) {
        throw RequestError(409, "not_assigned", "item " + s.item_id + " is not assigned to " + s.annotator_id);
    }
    if (source == annot::Source::selected) {
        const auto& cands = candidates_.at(s.item_id);
        for (const auto& c : s.chunks) {
            if (std::find(cands.begin(), cands.end(), c) == cands.end()) {
                throw RequestError(400, "not_a_candidate", "'" + c + "' is not one of the proposed chunks; use source manual");
            }
        }
    }
    annot::AnnotationRecord record{s.item_id, {s.chunks[0], s.chunks[1], s.chunks[2]}, source, s.annotator_id,
                                   iso8601(now)};
    record.validate();
    append(record);
    item.status = ItemStatus::done;
    return record;
}

void AnnotationStore::append(const annot::AnnotationRecord& record) {
    const std::string line = annot::record_to_json(record);
    append_line(journal_, line);
    records_.push_back(line);
}

Progress AnnotationStore::progress() const {
    std::shared_lock lock(mutex_);
    Progress p;
    // Expired leases are reported as pending without mutating the store.
    const TimePoint now = clock_();
    for (const auto& it : items_) {
        ++p.total;
        if (it.status == ItemStatus::done) {
            ++p.done;
            ++p.per_annotator[it.assigned_to];
        } else if (it.status == ItemStatus::assigned && now < it.assigned_at + lease_) {
            ++p.assigned;
        } else {
            ++p.pending;
        }
    }
    return p;
}

std::string AnnotationStore::export_jsonl() const {
    std::shared_lock lock(mutex_);
    std::string out;
    for (const auto& r : records_) out += r + '\n';
    return out;
}

std::optional<WorkItem> AnnotationStore::item(const std::string& item_id) const {
    std::shared_lock lock(mutex_);
    const auto found = index_.find(item_id);
    if (found == index_.end()) return std::nullopt;
    return items_[found->second];
}

std::vector<WorkItem> read_items(std::istream& in) {
    std::vector<WorkItem> out;
    for (const auto& j : read_jsonl(in, "items")) {
        try {
            WorkItem w;
            w.item_id = j.at("item_id").get<std::string>();
            w.garment_path = j.at("garment").get<std::string>();
            w.model_path = j.at("model").get<std::string>();
            w.category = annot::parse_category(j.at("category").get<std::string>());
            out.push_back(std::move(w));
        } catch (const json::exception& e) {
            throw InputError(std::string("items: ") + e.what());
        }
    }
    return out;
}

std::map<std::string, std::vector<std::string>> candidate_map(const std::vector<annot::CandidateRecord>& records) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& r : records) {
        require(out.emplace(r.item_id, r.candidates).second, "duplicate candidate record for " + r.item_id);
    }
    return out;
}

std::string to_string(StudyMode m) { return m == StudyMode::coherence ? "coherence" : "realism"; }

StudyMode parse_mode(const std::string& s) {
    if (s == "realism") return StudyMode::realism;
    if (s == "coherence") return StudyMode::coherence;
    throw InputError("unknown study mode '" + s + "' (expected realism or coherence)");
}

double SystemTally::preference() const { return total > 0 ? 100.0 * wins / total : 0.0; }

StudyStore::StudyStore(std::vector<StudyPair> pairs, std::optional<std::filesystem::path> journal, std::uint64_t seed,
                       Clock clock)
    : pairs_(std::move(pairs)), journal_(std::move(journal)), rng_(seed), clock_(std::move(clock)) {
    vote_counts_.assign(pairs_.size(), 0);
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
        const auto& p = pairs_[i];
        require(!p.pair_id.empty(), "study pair without pair_id");
        require(index_.emplace(p.pair_id, i).second, "duplicate study pair " + p.pair_id);
        require(p.image_a != p.image_b, "study pair " + p.pair_id + " shows the same image twice");
    }
    for (const auto& j : read_journal(journal_, "vote")) {
        try {
            Vote v;
            v.pair_id = j.at("pair_id").get<std::string>();
            v.choice = j.at("choice").get<std::string>() == "b" ? 'b' : 'a';
            v.mode = parse_mode(j.at("mode").get<std::string>());
            v.voter_id = j.at("voter_id").get<std::string>();
            v.timestamp = j.at("timestamp").get<std::string>();
            v.left = j.at("left").get<std::string>() == "b" ? 'b' : 'a';
            const auto found = index_.find(v.pair_id);
            require(found != index_.end(), "vote journal refers to unknown pair " + v.pair_id);
            require(voted_.emplace(std::make_pair(found->second, v.voter_id), true).second,
                    "vote journal holds a double vote on " + v.pair_id);
            ++vote_counts_[found->second];
            votes_.push_back(std::move(v));
        } catch (const json::exception& e) {
            throw InputError(std::string("vote journal: ") + e.what());
        }
    }
}

std::optional<ServedPair> StudyStore::next_pair(StudyMode mode, const std::string& voter_id) {
    if (voter_id.empty()) throw RequestError(400, "missing_voter", "voter_id is required");
    std::unique_lock lock(mutex_);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
        if (pairs_[i].mode != mode || voted_.count({i, voter_id})) continue;
        if (!best || vote_counts_[i] < vote_counts_[*best]) best = i;
    }
    if (!best) return std::nullopt;
    Serve serve{*best, rng_.bernoulli(0.5) ? 'b' : 'a', voter_id};
    std::string id;
    do {
        id = "s" + hex64(rng_.next());
    } while (serves_.count(id));
    serves_.emplace(id, serve);
    const auto& p = pairs_[*best];
    ServedPair out{id, mode, {}, mode == StudyMode::coherence};
    if (mode == StudyMode::coherence) out.chunks = p.chunks;
    return out;
}

Vote StudyStore::submit_vote(const std::string& serve_id, const std::string& side, const std::string& voter_id) {
    if (side != "left" && side != "right") throw RequestError(400, "invalid_choice", "choice must be left or right");
    std::unique_lock lock(mutex_);
    const auto found = serves_.find(serve_id);
    if (found == serves_.end()) throw RequestError(404, "unknown_serve", "unknown serve id");
    const Serve& serve = found->second;
    if (serve.voter_id != voter_id) throw RequestError(409, "wrong_voter", "this pair was served to another voter");
    if (voted_.count({serve.pair, voter_id})) throw RequestError(409, "duplicate_vote", "already voted on this pair");
    const auto& p = pairs_[serve.pair];
    const char right = serve.left == 'a' ? 'b' : 'a';
    Vote v{p.pair_id, side == "left" ? serve.left : right, p.mode, voter_id, iso8601(clock_()), serve.left};
    append(v);
    voted_.emplace(std::make_pair(serve.pair, voter_id), true);
    ++vote_counts_[serve.pair];
    return v;
}

void StudyStore::append(const Vote& v) {
    append_line(journal_, vote_to_json(v));
    votes_.push_back(v);
}

std::optional<std::string> StudyStore::image_path(const std::string& serve_id, const std::string& slot) const {
    std::shared_lock lock(mutex_);
    const auto found = serves_.find(serve_id);
    if (found == serves_.end()) return std::nullopt;
    const auto& p = pairs_[found->second.pair];
    const bool a_left = found->second.left == 'a';
    if (slot == "left") return a_left ? p.image_a : p.image_b;
    if (slot == "right") return a_left ? p.image_b : p.image_a;
    if (p.mode != StudyMode::coherence) return std::nullopt;
    if (slot == "model" && !p.model_image.empty()) return p.model_image;
    if (slot == "sketch" && !p.sketch.empty()) return p.sketch;
    if (slot == "pose" && !p.pose.empty()) return p.pose;
    return std::nullopt;
}

std::map<std::pair<std::string, std::string>, SystemTally> StudyStore::tally() const {
    std::shared_lock lock(mutex_);
    std::map<std::pair<std::string, std::string>, SystemTally> out;
    for (const auto& v : votes_) {
        const auto& p = pairs_[index_.at(v.pair_id)];
        auto& ab = out[{p.system_a, p.system_b}];
        auto& ba = out[{p.system_b, p.system_a}];
        ++ab.total;
        ++ba.total;
        ++(v.choice == 'a' ? ab : ba).wins;
    }
    return out;
}

std::string StudyStore::export_jsonl() const {
    std::shared_lock lock(mutex_);
    std::string out;
    for (const auto& v : votes_) out += vote_to_json(v) + '\n';
    return out;
}

std::size_t StudyStore::vote_count() const {
    std::shared_lock lock(mutex_);
    return votes_.size();
}

std::vector<StudyPair> read_pairs(std::istream& in) {
    std::vector<StudyPair> out;
    for (const auto& j : read_jsonl(in, "study pairs")) {
        try {
            StudyPair p;
            p.pair_id = j.at("pair_id").get<std::string>();
            p.mode = parse_mode(j.at("mode").get<std::string>());
            p.image_a = j.at("image_a").get<std::string>();
            p.image_b = j.at("image_b").get<std::string>();
            p.system_a = j.at("system_a").get<std::string>();
            p.system_b = j.at("system_b").get<std::string>();
            p.chunks = j.value("chunks", std::vector<std::string>{});
            p.model_image = j.value("model_image", std::string{});
            p.sketch = j.value("sketch", std::string{});
            p.pose = j.value("pose", std::string{});
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw InputError(std::string("study pairs: ") + e.what());
        }
    }
    return out;
}

std::string vote_to_json(const Vote& v) {
    return json{{"pair_id", v.pair_id},
                {"choice", std::string(1, v.choice)},
                {"mode", to_string(v.mode)},
                {"voter_id", v.voter_id},
                {"timestamp", v.timestamp},
                {"left", std::string(1, v.left)}}
        .dump();
}

// ---------------------------------------------------------------------- http

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send_json(res, status, json{{"error", code}, {"message", message}});
}

std::string content_type(const std::string& path) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".json") return "application/json";
    return "application/octet-stream";
}

void send_file(httplib::Response& res, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        send_error(res, 404, "missing_file", "image not available");
        return;
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    res.status = 200;
    res.set_content(ss.str(), content_type(path));
}

// Wraps a handler: RequestError -> its status, InputError/JSON errors -> 400.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const RequestError& e) {
            send_error(res, e.status(), e.code(), e.what());
        } catch (const json::exception& e) {
            send_error(res, 400, "bad_json", e.what());
        } catch (const InputError& e) {
            send_error(res, 400, "bad_request", e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

}  // namespace

struct Server::Impl {
    ServerConfig config;
    AnnotationStore* annotations;
    StudyStore* study;
    httplib::Server http;
    int port = -1;
};

Server::Server(ServerConfig config, AnnotationStore* annotations, StudyStore* study)
    : impl_(std::make_unique<Impl>()) {
    impl_->config = std::move(config);
    impl_->annotations = annotations;
    impl_->study = study;
    auto& http = impl_->http;
    Impl* s = impl_.get();

    const auto need_annotations = [s]() -> AnnotationStore& {
        if (!s->annotations) throw RequestError(404, "not_configured", "annotation service is not running");
        return *s->annotations;
    };
    const auto need_study = [s]() -> StudyStore& {
        if (!s->study) throw RequestError(404, "not_configured", "study service is not running");
        return *s->study;
    };

    http.Get("/api/items/next", guarded([need_annotations](const httplib::Request& req, httplib::Response& res) {
        auto& store = need_annotations();
        const auto a = store.next_item(req.get_param_value("annotator_id"));
        if (!a) {
            send_json(res, 200, json{{"status", "drained"}});
            return;
        }
        const auto& id = a->item.item_id;
        send_json(res, 200,
                  json{{"status", "assigned"},
                       {"item",
                        {{"item_id", id},
                         {"category", annot::to_string(a->item.category)},
                         {"garment_url", "/api/items/" + id + "/garment"},
                         {"model_url", "/api/items/" + id + "/model"},
                         {"lease_expires", iso8601(a->lease_expires)}}},
                       {"candidates", a->candidates}});
    }));

    http.Get(R"(/api/items/([^/]+)/(garment|model))",
             guarded([need_annotations](const httplib::Request& req, httplib::Response& res) {
                 const auto item = need_annotations().item(req.matches[1]);
                 if (!item) throw RequestError(404, "unknown_item", "unknown item");
                 send_file(res, req.matches[2] == "garment" ? item->garment_path : item->model_path);
             }));

    http.Post(R"(/api/items/([^/]+)/annotation)",
              guarded([need_annotations](const httplib::Request& req, httplib::Response& res) {
                  auto& store = need_annotations();
                  const json body = json::parse(req.body);
                  SubmittedAnnotation sub;
                  sub.item_id = req.matches[1];
                  sub.annotator_id = body.value("annotator_id", std::string{});
                  sub.chunks = body.at("chunks").get<std::vector<std::string>>();
                  sub.source = body.value("source", std::string{"selected"});
                  const auto record = store.submit(sub);
                  send_json(res, 200, json{{"status", "ok"}, {"record", json::parse(annot::record_to_json(record))}});
              }));

    http.Get("/api/progress", guarded([need_annotations](const httplib::Request&, httplib::Response& res) {
        const auto p = need_annotations().progress();
        send_json(res, 200,
                  json{{"total", p.total},
                       {"pending", p.pending},
                       {"assigned", p.assigned},
                       {"done", p.done},
                       {"per_annotator", p.per_annotator}});
    }));

    http.Get(R"(/api/study/(realism|coherence)/next)",
             guarded([need_study](const httplib::Request& req, httplib::Response& res) {
                 auto& store = need_study();
                 const auto pair = store.next_pair(parse_mode(req.matches[1]), req.get_param_value("voter_id"));
                 if (!pair) {
                     send_json(res, 200, json{{"status", "drained"}});
                     return;
                 }
                 const std::string base = "/api/study/images/" + pair->serve_id + "/";
                 json body{{"status", "pair"},
                           {"serve_id", pair->serve_id},
                           {"mode", to_string(pair->mode)},
                           {"left_url", base + "left"},
                           {"right_url", base + "right"}};
                 if (pair->has_conditions) {
                     json cond{{"chunks", pair->chunks}};
                     for (const char* slot : {"model", "sketch", "pose"}) {
                         if (store.image_path(pair->serve_id, slot)) cond[std::string(slot) + "_url"] = base + slot;
                     }
                     body["conditions"] = cond;
                 }
                 send_json(res, 200, body);
             }));

    http.Get(R"(/api/study/images/([^/]+)/(left|right|model|sketch|pose))",
             guarded([need_study](const httplib::Request& req, httplib::Response& res) {
                 const auto path = need_study().image_path(req.matches[1], req.matches[2]);
                 if (!path) throw RequestError(404, "unknown_image", "unknown image");
                 send_file(res, *path);
             }));

    http.Post("/api/study/votes", guarded([need_study](const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        need_study().submit_vote(body.at("serve_id").get<std::string>(), body.at("choice").get<std::string>(),
                                 body.value("voter_id", std::string{}));
        send_json(res, 200, json{{"status", "ok"}});
    }));

    http.Get("/api/export", guarded([need_annotations, need_study](const httplib::Request& req, httplib::Response& res) {
        const auto kind = req.get_param_value("kind");
        std::string body;
        if (kind == "annotations") {
            body = need_annotations().export_jsonl();
        } else if (kind == "votes") {
            body = need_study().export_jsonl();
        } else {
            throw RequestError(400, "invalid_kind", "kind must be annotations or votes");
        }
        res.status = 200;
        res.set_content(body, "application/x-ndjson");
    }));

    if (!impl_->config.static_dir.empty()) {
        require(http.set_mount_point("/", impl_->config.static_dir),
                "static directory does not exist: " + impl_->config.static_dir);
    }
}

Server::~Server() { stop(); }

int Server::bind() {
    auto& c = impl_->config;
    if (c.port == 0) {
        impl_->port = impl_->http.bind_to_any_port(c.host);
    } else {
        impl_->port = impl_->http.bind_to_port(c.host, c.port) ? c.port : -1;
    }
    if (impl_->port < 0) throw RuntimeFailure("cannot bind " + c.host + ":" + std::to_string(c.port));
    return impl_->port;
}

void Server::run() {
    if (impl_->port < 0) bind();
    impl_->http.listen_after_bind();
}

void Server::stop() {
    if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace mgd::service

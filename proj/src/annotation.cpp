// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/annotation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mgd/error.hpp"

namespace mgd::annot {

namespace detail {
extern const char* const kBuiltinLexicon;
}

using nlohmann::json;

namespace {

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

bool is_alnum(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string join(const std::vector<std::string>& words, std::size_t begin, std::size_t end) {
    std::string out;
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) out += ' ';
        out += words[i];
    }
    return out;
}

std::vector<double> normalized(std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0) {
        for (double& x : v) x /= n;
    }
    return v;
}

json parse_line(const std::string& line, std::size_t number) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw InputError("line " + std::to_string(number) + ": malformed JSON (" + e.what() + ")");
    }
}

template <typename Fn>
void for_each_line(std::istream& in, Fn&& fn) {
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = parse_line(line, number);
        try {
            fn(j);
        } catch (const json::exception& e) {
            throw InputError("line " + std::to_string(number) + ": " + e.what());
        }
    }
}

class ProjectedEmbedder : public metrics::EmbeddingExtractor {
public:
    ProjectedEmbedder(const metrics::EmbeddingExtractor& base, Eigen::MatrixXd w) : base_(base), w_(std::move(w)) {}

    std::vector<double> embed_image(const Image& image) const override {
        const auto v = base_.embed_image(image);
        const Eigen::VectorXd p = w_ * Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        return normalized(std::vector<double>(p.data(), p.data() + p.size()));
    }
    std::vector<double> embed_text(const std::string& text) const override { return base_.embed_text(text); }

private:
    const metrics::EmbeddingExtractor& base_;
    Eigen::MatrixXd w_;
};

}  // namespace

std::string to_string(Category c) {
    switch (c) {
        case Category::upper: return "upper";
        case Category::lower: return "lower";
        case Category::dresses: return "dresses";
    }
    return "upper";
}

Category parse_category(const std::string& s) {
    if (s == "upper") return Category::upper;
    if (s == "lower") return Category::lower;
    if (s == "dresses") return Category::dresses;
    throw InputError("unknown category '" + s + "' (expected upper, lower or dresses)");
}

std::optional<std::string> chunk_rejection(const std::string& text) {
    if (text.empty()) return "empty chunk";
    for (char c : text) {
        if (!is_alnum(c) && c != ' ' && c != '-') return "contains characters outside [a-z0-9 -]";
    }
    if (!is_alnum(text.front()) || !is_alnum(text.back())) return "must start and end with a letter or digit";
    if (text.find("  ") != std::string::npos) return "repeated space";
    if (is_article(text.substr(0, text.find(' ')))) return "starts with an article";
    return std::nullopt;
}

Lexicon Lexicon::parse(const std::string& text) {
    Lexicon lex;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string word, tag;
        if (!(fields >> word >> tag)) throw InputError("lexicon line " + std::to_string(number) + ": expected '<word> <TAG>'");
        Tag t;
        if (tag == "DET") t = Tag::det;
        else if (tag == "ADJ") t = Tag::adj;
        else if (tag == "NOUN") t = Tag::noun;
        else throw InputError("lexicon line " + std::to_string(number) + ": unknown tag " + tag);
        lex.tags_.emplace(lower(word), t);
    }
    return lex;
}

Lexicon Lexicon::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open lexicon " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

const Lexicon& Lexicon::builtin() {
    static const Lexicon lex = parse(detail::kBuiltinLexicon);
    return lex;
}

Tag Lexicon::tag(const std::string& word) const {
    const auto it = tags_.find(word);
    if (it != tags_.end()) return it->second;
    if (!word.empty() && word[0] >= '0' && word[0] <= '9') return Tag::num;
    return Tag::other;
}

SuffixLemmatizer::SuffixLemmatizer(const Lexicon& lexicon)
    : lexicon_(lexicon),
      exceptions_{{"women", "woman"}, {"men", "man"},     {"children", "child"}, {"feet", "foot"},
                  {"wore", "wear"},   {"worn", "wear"},
                  {"scarves", "scarf"}, {"knives", "knife"}} {}

std::string SuffixLemmatizer::lemma(const std::string& word) const {
    if (const auto it = exceptions_.find(word); it != exceptions_.end()) return it->second;
    if (lexicon_.contains(word)) return word;
    for (char c : word) {
        if (!(c >= 'a' && c <= 'z') && c != '-') return word;
    }
    std::vector<std::string> candidates;
    const auto strip = [&](std::size_t n) { return word.substr(0, word.size() - n); };
    const auto undouble = [](const std::string& s) {
        const std::size_t n = s.size();
        return n >= 2 && s[n - 1] == s[n - 2] ? s.substr(0, n - 1) : s;
    };
    if (ends_with(word, "ies")) candidates.push_back(strip(3) + "y");
    if (ends_with(word, "ves")) {
        candidates.push_back(strip(3) + "f");
        candidates.push_back(strip(3) + "fe");
    }
    if (ends_with(word, "es")) candidates.push_back(strip(2));
    if (ends_with(word, "s") && !ends_with(word, "ss")) candidates.push_back(strip(1));
    if (ends_with(word, "ing")) {
        candidates.push_back(strip(3));
        candidates.push_back(strip(3) + "e");
        candidates.push_back(undouble(strip(3)));
    }
    if (ends_with(word, "ed")) {
        candidates.push_back(strip(2));
        candidates.push_back(strip(1));
        candidates.push_back(undouble(strip(2)));
    }
    for (const auto& c : candidates) {
        if (lexicon_.contains(c)) return c;
    }
    return word;
}

std::vector<std::string> LexiconChunker::chunks(const std::vector<std::string>& tokens) const {
    std::vector<Tag> tags;
    tags.reserve(tokens.size());
    for (const auto& t : tokens) tags.push_back(lexicon_.tag(t));
    std::vector<std::string> out;
    const std::size_t n = tokens.size();
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        if (tags[j] == Tag::det) ++j;
        while (j < n && (tags[j] == Tag::adj || tags[j] == Tag::num)) ++j;
        std::size_t k = j;
        while (k < n && tags[k] == Tag::noun) ++k;
        if (k > j) {
            out.push_back(join(tokens, i, k));
            i = k;
        } else {
            ++i;
        }
    }
    return out;
}

std::vector<std::string> tokenize(const std::string& caption) {
    static const std::string kEdge = ",.;:!?()\"";
    std::vector<std::string> out;
    std::istringstream in(lower(caption));
    std::string word;
    while (in >> word) {
        std::size_t b = 0, e = word.size();
        std::vector<std::string> tail;
        while (b < e && kEdge.find(word[b]) != std::string::npos) out.emplace_back(1, word[b++]);
        while (e > b && kEdge.find(word[e - 1]) != std::string::npos) tail.emplace_back(1, word[--e]);
        if (e > b) out.push_back(word.substr(b, e - b));
        out.insert(out.end(), tail.rbegin(), tail.rend());
    }
    return out;
}

std::string strip_leading_articles(const std::string& chunk) {
    std::string s = chunk;
    for (;;) {
        const auto space = s.find(' ');
        if (space == std::string::npos || !is_article(s.substr(0, space))) return s;
        s = s.substr(space + 1);
    }
}

std::vector<NounChunk> extract_noun_chunks(const std::vector<Caption>& captions, const Lemmatizer& lemmatizer,
                                           const Chunker& chunker) {
    std::vector<NounChunk> out;
    std::set<std::pair<Category, std::string>> seen;
    for (const auto& caption : captions) {
        auto tokens = tokenize(caption.text);
        for (auto& t : tokens) t = lemmatizer.lemma(t);
        for (const auto& raw : chunker.chunks(tokens)) {
            std::string text = strip_leading_articles(raw);
            if (is_article(text) || !is_valid_chunk(text)) continue;
            if (seen.emplace(caption.category, text).second) out.push_back({text, caption.category});
        }
    }
    return out;
}

PromptTemplateSet::PromptTemplateSet(std::vector<std::string> templates) : templates_(std::move(templates)) {
    require(!templates_.empty(), "prompt template set is empty");
    const std::string ph = kPlaceholder;
    for (const auto& t : templates_) {
        const auto first = t.find(ph);
        require(first != std::string::npos && t.find(ph, first + 1) == std::string::npos,
                "template must contain '[noun chunk]' exactly once: " + t);
    }
}

const PromptTemplateSet& PromptTemplateSet::standard() {
    static const PromptTemplateSet set({
        "a photo of a [noun chunk]",
        "a photo of a nice [noun chunk]",
        "a photo of a cool [noun chunk]",
        "a photo of an expensive [noun chunk]",
        "a good photo of a [noun chunk]",
        "a bright photo of a [noun chunk]",
        "a fashion studio shot of a [noun chunk]",
        "a fashion magazine photo of a [noun chunk]",
        "a fashion brochure photo of a [noun chunk]",
        "a fashion catalog photo of a [noun chunk]",
        "a fashion press photo of a [noun chunk]",
        "a yoox photo of a [noun chunk]",
        "a yoox web image of a [noun chunk]",
        "a high-resolution photo of a [noun chunk]",
        "a cropped photo of a [noun chunk]",
        "a close-up photo of a [noun chunk]",
        "a photo of one [noun chunk]",
    });
    return set;
}

std::string PromptTemplateSet::fill(std::size_t i, const std::string& chunk) const {
    std::string t = templates_.at(i);
    const std::string ph = kPlaceholder;
    return t.replace(t.find(ph), ph.size(), chunk);
}

std::vector<double> ensemble_embed(const std::string& chunk, const PromptTemplateSet& templates,
                                   const metrics::EmbeddingExtractor& embedder) {
    std::vector<double> sum;
    for (std::size_t i = 0; i < templates.templates().size(); ++i) {
        const auto e = normalized(embedder.embed_text(templates.fill(i, chunk)));
        if (sum.empty()) sum.assign(e.size(), 0.0);
        require(e.size() == sum.size(), "embedder returned vectors of different sizes");
        for (std::size_t d = 0; d < e.size(); ++d) sum[d] += e[d];
    }
    return normalized(std::move(sum));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "cosine of vectors with different sizes");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
}

std::vector<std::size_t> rank_by_cosine(const std::vector<double>& query,
                                        const std::vector<std::vector<double>>& embeddings,
                                        const std::vector<std::string>& texts) {
    require(embeddings.size() == texts.size(), "one text per embedding required");
    std::vector<double> scores;
    scores.reserve(embeddings.size());
    for (const auto& e : embeddings) scores.push_back(cosine(query, e));
    std::vector<std::size_t> order(embeddings.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (texts[a] != texts[b]) return texts[a] < texts[b];
        return a < b;
    });
    return order;
}

std::vector<std::string> rank_candidates(const std::vector<std::string>& chunks, const std::vector<ModelScores>& models,
                                         const RankOptions& options) {
    require(!models.empty(), "rank_candidates needs at least one model");
    require(options.k_per_model > 0 && options.target > 0, "k_per_model and target must be positive");
    // Distinct chunks, first occurrence wins.
    std::vector<std::size_t> distinct;
    std::set<std::string> names;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (names.insert(chunks[i]).second) distinct.push_back(i);
    }
    const auto target = static_cast<std::size_t>(options.target);
    if (distinct.size() < target) {
        throw InputError("need " + std::to_string(target) + " distinct noun chunks, got " +
                         std::to_string(distinct.size()) + " (short by " + std::to_string(target - distinct.size()) +
                         ")");
    }
    std::vector<std::string> texts;
    for (std::size_t i : distinct) texts.push_back(chunks[i]);

    std::vector<std::vector<std::size_t>> rankings;
    for (const auto& m : models) {
        require(m.chunk_vecs.size() == chunks.size(), "model scores must cover every chunk");
        std::vector<std::vector<double>> vecs;
        for (std::size_t i : distinct) vecs.push_back(m.chunk_vecs[i]);
        rankings.push_back(rank_by_cosine(m.image_vec, vecs, texts));
    }

    std::vector<std::string> out;
    std::vector<bool> used(texts.size(), false);
    const auto take = [&](std::size_t idx) {
        used[idx] = true;
        out.push_back(texts[idx]);
    };
    const auto k = std::min(static_cast<std::size_t>(options.k_per_model), texts.size());
    for (const auto& r : rankings) {
        for (std::size_t i = 0; i < k; ++i) {
            if (!used[r[i]]) take(r[i]);
        }
    }
    if (out.size() > target) out.resize(target);
    std::vector<std::size_t> cursor(rankings.size(), 0);
    while (out.size() < target) {
        for (std::size_t m = 0; m < rankings.size() && out.size() < target; ++m) {
            auto& c = cursor[m];
            while (c < texts.size() && used[rankings[m][c]]) ++c;
            if (c < texts.size()) take(rankings[m][c]);
        }
    }
    return out;
}

std::vector<std::string> rank_candidates(const Image& image, const std::vector<std::string>& chunks,
                                         const std::vector<const metrics::EmbeddingExtractor*>& models,
                                         const PromptTemplateSet& templates, const RankOptions& options) {
    std::vector<ModelScores> scores;
    for (const auto* m : models) {
        ModelScores s{m->embed_image(image), {}};
        for (const auto& c : chunks) s.chunk_vecs.push_back(ensemble_embed(c, templates, *m));
        scores.push_back(std::move(s));
    }
    return rank_candidates(chunks, scores, options);
}

std::vector<NounChunk> coarse_tag(const Image& image, Category category, const std::vector<NounChunk>& table,
                                  const metrics::EmbeddingExtractor& embedder, const PromptTemplateSet& templates,
                                  int top) {
    std::vector<std::string> texts;
    std::set<std::string> seen;
    for (const auto& c : table) {
        if (c.category == category && seen.insert(c.text).second) texts.push_back(c.text);
    }
    if (top <= 0 || texts.size() < static_cast<std::size_t>(top)) {
        throw InputError("chunk table has " + std::to_string(texts.size()) + " entries for category " +
                         to_string(category) + ", need " + std::to_string(top));
    }
    std::vector<std::vector<double>> vecs;
    for (const auto& t : texts) vecs.push_back(ensemble_embed(t, templates, embedder));
    const auto order = rank_by_cosine(embedder.embed_image(image), vecs, texts);
    std::vector<NounChunk> out;
    for (int i = 0; i < top; ++i) out.push_back({texts[order[static_cast<std::size_t>(i)]], category});
    return out;
}

double topk_accuracy(const metrics::EmbeddingExtractor& embedder, const std::vector<LabeledPair>& pairs,
                     const std::vector<std::string>& pool, const PromptTemplateSet& templates, int k) {
    require(!pairs.empty(), "top-k accuracy needs labeled pairs");
    require(k > 0, "k must be positive");
    std::vector<std::vector<double>> vecs;
    for (const auto& t : pool) vecs.push_back(ensemble_embed(t, templates, embedder));
    int hits = 0;
    for (const auto& p : pairs) {
        const auto order = rank_by_cosine(embedder.embed_image(p.image), vecs, pool);
        const std::size_t limit = std::min(order.size(), static_cast<std::size_t>(k));
        for (std::size_t i = 0; i < limit; ++i) {
            if (pool[order[i]] == p.chunk) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

std::unique_ptr<metrics::EmbeddingExtractor> LinearProjectionTrainer::fine_tune(
    const metrics::EmbeddingExtractor& base, const std::vector<LabeledPair>& pairs,
    const PromptTemplateSet& templates) const {
    require(!pairs.empty(), "fine-tuning needs labeled pairs");
    require(ridge_ > 0.0, "ridge weight must be positive");
    std::vector<std::vector<double>> a, t;
    for (const auto& p : pairs) {
        a.push_back(normalized(base.embed_image(p.image)));
        t.push_back(ensemble_embed(p.chunk, templates, base));
    }
    const auto da = static_cast<Eigen::Index>(a[0].size()), dt = static_cast<Eigen::Index>(t[0].size());
    const auto n = static_cast<Eigen::Index>(pairs.size());
    Eigen::MatrixXd am(da, n), tm(dt, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        require(static_cast<Eigen::Index>(a[static_cast<std::size_t>(j)].size()) == da &&
                    static_cast<Eigen::Index>(t[static_cast<std::size_t>(j)].size()) == dt,
                "embedder returned vectors of different sizes");
        for (Eigen::Index i = 0; i < da; ++i) am(i, j) = a[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
        for (Eigen::Index i = 0; i < dt; ++i) tm(i, j) = t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    }
    // argmin_W |W A - T|^2 + ridge |W - P|^2, P = identity when the spaces match.
    Eigen::MatrixXd prior = Eigen::MatrixXd::Zero(dt, da);
    if (da == dt) prior.setIdentity();
    const Eigen::MatrixXd gram = am * am.transpose() + ridge_ * Eigen::MatrixXd::Identity(da, da);
    const Eigen::MatrixXd rhs = tm * am.transpose() + ridge_ * prior;
    const Eigen::MatrixXd w = gram.transpose().ldlt().solve(rhs.transpose()).transpose();
    return std::make_unique<ProjectedEmbedder>(base, w);
}

std::string to_string(Source s) { return s == Source::manual ? "manual" : "selected"; }

Source parse_source(const std::string& s) {
    if (s == "selected") return Source::selected;
    if (s == "manual") return Source::manual;
    throw InputError("unknown annotation source '" + s + "' (expected selected or manual)");
}

void AnnotationRecord::validate() const {
    require(!item_id.empty(), "annotation record without item_id");
    require(!annotator_id.empty(), "annotation record without annotator_id");
    require(!timestamp.empty(), "annotation record without timestamp");
    for (const auto& c : chunks) {
        if (const auto why = chunk_rejection(c)) throw InputError("invalid chunk '" + c + "': " + *why);
    }
    require(chunks[0] != chunks[1] && chunks[0] != chunks[2] && chunks[1] != chunks[2],
            "annotation chunks must be distinct");
}

std::vector<Caption> read_corpus(std::istream& in) {
    std::vector<Caption> out;
    for_each_line(in, [&](const json& j) {
        out.push_back({j.at("caption").get<std::string>(), parse_category(j.at("category").get<std::string>())});
    });
    return out;
}

void write_chunk_table(std::ostream& out, const std::vector<NounChunk>& table) {
    for (const auto& c : table) out << json{{"text", c.text}, {"category", to_string(c.category)}}.dump() << '\n';
}

std::vector<NounChunk> read_chunk_table(std::istream& in) {
    std::vector<NounChunk> out;
    for_each_line(in, [&](const json& j) {
        NounChunk c{j.at("text").get<std::string>(), parse_category(j.at("category").get<std::string>())};
        if (const auto why = chunk_rejection(c.text)) throw InputError("invalid chunk '" + c.text + "': " + *why);
        out.push_back(std::move(c));
    });
    return out;
}

void write_candidates(std::ostream& out, const std::vector<CandidateRecord>& records) {
    for (const auto& r : records) out << json{{"item_id", r.item_id}, {"candidates", r.candidates}}.dump() << '\n';
}

std::vector<CandidateRecord> read_candidates(std::istream& in) {
    std::vector<CandidateRecord> out;
    for_each_line(in, [&](const json& j) {
        out.push_back({j.at("item_id").get<std::string>(), j.at("candidates").get<std::vector<std::string>>()});
    });
    return out;
}

std::string record_to_json(const AnnotationRecord& r) {
    return json{{"item_id", r.item_id},
                {"chunks", r.chunks},
                {"source", to_string(r.source)},
                {"annotator_id", r.annotator_id},
                {"timestamp", r.timestamp}}
        .dump();
}

AnnotationRecord record_from_json(const std::string& line) {
    const json j = parse_line(line, 1);
    AnnotationRecord r;
    try {
        r.item_id = j.at("item_id").get<std::string>();
        const auto chunks = j.at("chunks").get<std::vector<std::string>>();
        require(chunks.size() == 3, "annotation record needs exactly 3 chunks");
        std::copy(chunks.begin(), chunks.end(), r.chunks.begin());
        r.source = parse_source(j.at("source").get<std::string>());
        r.annotator_id = j.at("annotator_id").get<std::string>();
        r.timestamp = j.at("timestamp").get<std::string>();
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed annotation record: ") + e.what());
    }
    r.validate();
    return r;
}

}  // namespace mgd::annot

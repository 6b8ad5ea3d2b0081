// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mgd/metrics.hpp"

namespace mgd::annot {

enum class Category { upper, lower, dresses };

std::string to_string(Category c);
Category parse_category(const std::string& s);  // throws InputError

// Reason a chunk string is not a valid noun chunk, or nullopt when it is.
// Valid: nonempty, only [a-z0-9 -], single spaces between words, no leading
// or trailing space, no leading article.
std::optional<std::string> chunk_rejection(const std::string& text);
inline bool is_valid_chunk(const std::string& text) { return !chunk_rejection(text).has_value(); }

struct NounChunk {
    std::string text;
    Category category = Category::upper;

    bool operator==(const NounChunk&) const = default;
};

enum class Tag { det, adj, noun, num, other };

// Word -> tag table loaded from "<word> <TAG>" lines ('#' comments).
class Lexicon {
public:
    Lexicon() = default;
    static Lexicon parse(const std::string& text);
    static Lexicon load(const std::string& path);
    static const Lexicon& builtin();  // data/lexicon.txt, compiled in

    Tag tag(const std::string& word) const;  // digits-first tokens are num
    bool contains(const std::string& word) const { return tags_.count(word) > 0; }
    std::size_t size() const { return tags_.size(); }

private:
    std::map<std::string, Tag> tags_;
};

class Lemmatizer {
public:
    virtual ~Lemmatizer() = default;
    virtual std::string lemma(const std::string& word) const = 0;
};

// Exception table, then lexicon lookup (known words are already lemmas), then
// suffix rules (-ies, -es, -s, -ing, -ed) whose result must be a lexicon word.
// Anything else is returned unchanged.
class SuffixLemmatizer : public Lemmatizer {
public:
    explicit SuffixLemmatizer(const Lexicon& lexicon = Lexicon::builtin());
    std::string lemma(const std::string& word) const override;

private:
    const Lexicon& lexicon_;
    std::map<std::string, std::string> exceptions_;
};

class Chunker {
public:
    virtual ~Chunker() = default;
    // Chunks of an already lemmatized, lowercase token sequence.
    virtual std::vector<std::string> chunks(const std::vector<std::string>& tokens) const = 0;
};

// Maximal runs of det? (adj|num)* noun+ over the lexicon tags.
class LexiconChunker : public Chunker {
public:
    explicit LexiconChunker(const Lexicon& lexicon = Lexicon::builtin()) : lexicon_(lexicon) {}
    std::vector<std::string> chunks(const std::vector<std::string>& tokens) const override;

private:
    const Lexicon& lexicon_;
};

// Lowercase, split on whitespace; sentence punctuation (, . ; : ! ? ( ) ")
// at token edges becomes its own token.
std::vector<std::string> tokenize(const std::string& caption);

std::string strip_leading_articles(const std::string& chunk);

struct Caption {
    std::string text;
    Category category = Category::upper;
};

// Unique chunks in first-seen order (uniqueness per category).
std::vector<NounChunk> extract_noun_chunks(const std::vector<Caption>& captions, const Lemmatizer& lemmatizer,
                                           const Chunker& chunker);

// The 17 prompt templates, each with one "[noun chunk]" placeholder.
class PromptTemplateSet {
public:
    static const PromptTemplateSet& standard();
    explicit PromptTemplateSet(std::vector<std::string> templates);  // validates placeholders

    static constexpr const char* kPlaceholder = "[noun chunk]";
    const std::vector<std::string>& templates() const { return templates_; }
    std::string fill(std::size_t i, const std::string& chunk) const;

private:
    std::vector<std::string> templates_;
};

// Mean of the normalized template embeddings, renormalized.
std::vector<double> ensemble_embed(const std::string& chunk, const PromptTemplateSet& templates,
                                   const metrics::EmbeddingExtractor& embedder);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Indices of `embeddings` sorted by cosine to `query` (descending), ties by
// `texts` ascending.
std::vector<std::size_t> rank_by_cosine(const std::vector<double>& query,
                                        const std::vector<std::vector<double>>& embeddings,
                                        const std::vector<std::string>& texts);

struct RankOptions {
    int k_per_model = 5;
    int target = 25;
};

// One embedding space per model: the image vector and every chunk's ensemble
// embedding under that model.
struct ModelScores {
    std::vector<double> image_vec;
    std::vector<std::vector<double>> chunk_vecs;  // parallel to the chunk list
};

// Top-k per model, unioned in model order without repetition, then
// round-robin backfill from each model's next-best unused chunk up to
// `target`. Throws InputError if fewer than `target` distinct chunks exist.
std::vector<std::string> rank_candidates(const std::vector<std::string>& chunks, const std::vector<ModelScores>& models,
                                         const RankOptions& options = {});
// Embeds the image and the chunks with each model first.
std::vector<std::string> rank_candidates(const Image& image, const std::vector<std::string>& chunks,
                                         const std::vector<const metrics::EmbeddingExtractor*>& models,
                                         const PromptTemplateSet& templates, const RankOptions& options = {});

// Top `top` chunks of `table` restricted to `category`, by cosine between the
// image embedding and the ensemble chunk embeddings.
std::vector<NounChunk> coarse_tag(const Image& image, Category category, const std::vector<NounChunk>& table,
                                  const metrics::EmbeddingExtractor& embedder, const PromptTemplateSet& templates,
                                  int top = 3);

struct LabeledPair {
    Image image;
    std::string chunk;
};

// Fraction of pairs whose chunk is in the top-k ranking of `pool`.
double topk_accuracy(const metrics::EmbeddingExtractor& embedder, const std::vector<LabeledPair>& pairs,
                     const std::vector<std::string>& pool, const PromptTemplateSet& templates, int k = 3);

// Fine-tuning hook: returns a new embedder trained on labeled pairs.
class EmbedderTrainer {
public:
    virtual ~EmbedderTrainer() = default;
    virtual std::unique_ptr<metrics::EmbeddingExtractor> fine_tune(const metrics::EmbeddingExtractor& base,
                                                                   const std::vector<LabeledPair>& pairs,
                                                                   const PromptTemplateSet& templates) const = 0;
};

// Image side becomes normalize(W * base_image(x)), text side is unchanged.
// W is the ridge solution pulling image vectors onto their chunks' ensemble
// embeddings, shrunk towards the identity with weight `ridge`.
class LinearProjectionTrainer : public EmbedderTrainer {
public:
    explicit LinearProjectionTrainer(double ridge = 1e-2) : ridge_(ridge) {}
    std::unique_ptr<metrics::EmbeddingExtractor> fine_tune(const metrics::EmbeddingExtractor& base,
                                                           const std::vector<LabeledPair>& pairs,
                                                           const PromptTemplateSet& templates) const override;

private:
    double ridge_;
};

// JSONL records.
struct CandidateRecord {
    std::string item_id;
    std::vector<std::string> candidates;
};

enum class Source { selected, manual };

struct AnnotationRecord {
    std::string item_id;
    std::array<std::string, 3> chunks;
    Source source = Source::selected;
    std::string annotator_id;
    std::string timestamp;  // ISO-8601 UTC

    void validate() const;  // throws InputError
};

std::string to_string(Source s);
Source parse_source(const std::string& s);

std::vector<Caption> read_corpus(std::istream& in);
void write_chunk_table(std::ostream& out, const std::vector<NounChunk>& table);
std::vector<NounChunk> read_chunk_table(std::istream& in);
void write_candidates(std::ostream& out, const std::vector<CandidateRecord>& records);
std::vector<CandidateRecord> read_candidates(std::istream& in);
std::string record_to_json(const AnnotationRecord& r);
AnnotationRecord record_from_json(const std::string& line);

}  // namespace mgd::annot

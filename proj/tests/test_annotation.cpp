// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mgd/annotation.hpp"
#include "mgd/error.hpp"
#include "mgd/rng.hpp"
#include "mgd/synthetic.hpp"

using namespace mgd;
using namespace mgd::annot;

namespace {

const PromptTemplateSet& identity_templates() {
    static const PromptTemplateSet set({"[noun chunk]"});
    return set;
}

// Text side: lookup table. Image side: the vector registered for the index
// stored in pixel (0,0,0) * 100.
class StubEmbedder : public metrics::EmbeddingExtractor {
public:
    std::map<std::string, std::vector<double>> text;
    std::vector<std::vector<double>> images;

    std::vector<double> embed_image(const Image& image) const override {
        return images.at(static_cast<std::size_t>(std::lround(image.at(0, 0, 0) * 100)));
    }
    std::vector<double> embed_text(const std::string& t) const override { return text.at(t); }
};

class ConstantEmbedder : public metrics::EmbeddingExtractor {
public:
    std::vector<double> v{3.0, 0.0, 4.0};
    std::vector<double> embed_image(const Image&) const override { return v; }
    std::vector<double> embed_text(const std::string&) const override { return v; }
};

Image image_id(int i) { return Image(1, 1, i / 100.0); }

std::vector<std::string> texts_of(const std::vector<NounChunk>& chunks) {
    std::vector<std::string> out;
    for (const auto& c : chunks) out.push_back(c.text);
    return out;
}

std::vector<NounChunk> extract(const std::vector<std::string>& captions, Category cat = Category::upper) {
    std::vector<Caption> cs;
    for (const auto& c : captions) cs.push_back({c, cat});
    const SuffixLemmatizer lem;
    const LexiconChunker chunker;
    return extract_noun_chunks(cs, lem, chunker);
}

// Exhaustive selection: repeated linear argmax instead of sorting.
std::vector<std::string> oracle_rank(const std::vector<std::string>& chunks, const std::vector<ModelScores>& models,
                                     int k, int target) {
    std::vector<std::string> texts;
    std::vector<std::size_t> first;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (std::find(texts.begin(), texts.end(), chunks[i]) == texts.end()) {
            texts.push_back(chunks[i]);
            first.push_back(i);
        }
    }
    const auto best_excluding = [&](const ModelScores& m, const std::set<std::string>& excluded) {
        int best = -1;
        double best_score = 0.0;
        for (std::size_t i = 0; i < texts.size(); ++i) {
            if (excluded.count(texts[i])) continue;
            const double s = cosine(m.image_vec, m.chunk_vecs[first[i]]);
            if (best < 0 || s > best_score || (s == best_score && texts[i] < texts[static_cast<std::size_t>(best)])) {
                best = static_cast<int>(i);
                best_score = s;
            }
        }
        return best;
    };
    std::vector<std::string> out;
    std::set<std::string> used;
    for (const auto& m : models) {
        std::set<std::string> picked;
        for (int r = 0; r < k; ++r) {
            const int b = best_excluding(m, picked);
            if (b < 0) break;
            picked.insert(texts[static_cast<std::size_t>(b)]);
            if (used.insert(texts[static_cast<std::size_t>(b)]).second) out.push_back(texts[static_cast<std::size_t>(b)]);
        }
    }
    if (out.size() > static_cast<std::size_t>(target)) out.resize(static_cast<std::size_t>(target));
    while (out.size() < static_cast<std::size_t>(target)) {
        for (const auto& m : models) {
            if (out.size() == static_cast<std::size_t>(target)) break;
            const int b = best_excluding(m, used);
            if (b < 0) continue;
            used.insert(texts[static_cast<std::size_t>(b)]);
            out.push_back(texts[static_cast<std::size_t>(b)]);
        }
    }
    return out;
}

// Coarse integer vectors so that many cosines tie exactly.
std::vector<double> coarse_vector(Rng& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = rng.uniform_int(-1, 1);
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) v[0] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("chunk validation") {
    CHECK(is_valid_chunk("red dress"));
    CHECK(is_valid_chunk("t-shirt"));
    CHECK(is_valid_chunk("2 pocket jacket"));
    CHECK_FALSE(is_valid_chunk(""));
    CHECK_FALSE(is_valid_chunk("50% off!"));
    CHECK_FALSE(is_valid_chunk("Red dress"));
    CHECK_FALSE(is_valid_chunk("a red dress"));
    CHECK_FALSE(is_valid_chunk("the dress"));
    CHECK_FALSE(is_valid_chunk(" dress"));
    CHECK_FALSE(is_valid_chunk("dress "));
    CHECK_FALSE(is_valid_chunk("red  dress"));
    CHECK_FALSE(is_valid_chunk("-dress"));
    CHECK_FALSE(is_valid_chunk("caf\xc3\xa9 dress"));
    CHECK(is_valid_chunk("another dress"));
    CHECK(*chunk_rejection("the dress") == "starts with an article");
}

TEST_CASE("tokenizer splits edge punctuation") {
    CHECK(tokenize("A red Dress, with pockets!") ==
          std::vector<std::string>{"a", "red", "dress", ",", "with", "pockets", "!"});
    CHECK(tokenize("  (50% off!)  ") == std::vector<std::string>{"(", "50%", "off", "!", ")"});
    CHECK(tokenize("").empty());
}

TEST_CASE("lemmatizer reduces inflections to lexicon roots") {
    const SuffixLemmatizer lem;
    const std::map<std::string, std::string> cases{
        {"dresses", "dress"}, {"blouses", "blouse"}, {"sleeves", "sleeve"},  {"t-shirts", "t-shirt"},
        {"jeans", "jeans"},   {"striped", "striped"}, {"ruffles", "ruffle"}, {"women", "woman"},
        {"pockets", "pocket"}, {"dress", "dress"},   {"foobars", "foobars"}, {"50%", "50%"},
        {"hoodies", "hoodie"}, {"knitting", "knit"}, {"layering", "layering"}};
    for (const auto& [word, want] : cases) {
        CAPTURE(word);
        CHECK(lem.lemma(word) == want);
    }
}

TEST_CASE("lexicon") {
    const auto& lex = Lexicon::builtin();
    CHECK(lex.size() >= 450);
    CHECK(lex.tag("dress") == Tag::noun);
    CHECK(lex.tag("red") == Tag::adj);
    CHECK(lex.tag("the") == Tag::det);
    CHECK(lex.tag("3") == Tag::num);
    CHECK(lex.tag("with") == Tag::other);
    const auto custom = Lexicon::parse("# comment\nfoo NOUN\nBar ADJ\n");
    CHECK(custom.size() == 2);
    CHECK(custom.tag("bar") == Tag::adj);
    CHECK_THROWS_AS(Lexicon::parse("foo VERB\n"), InputError);
    CHECK_THROWS_AS(Lexicon::parse("foo\n"), InputError);
}

TEST_CASE("chunker finds maximal adjective-noun runs") {
    const LexiconChunker chunker;
    CHECK(chunker.chunks({"a", "red", "dress"}) == std::vector<std::string>{"a red dress"});
    CHECK(chunker.chunks({"long", "floral", "maxi", "dress", "with", "short", "sleeve"}) ==
          std::vector<std::string>{"long floral maxi dress", "short sleeve"});
    CHECK(chunker.chunks({"red", "and", "white"}).empty());
    CHECK(chunker.chunks({"2%", "cotton", "shirt"}) == std::vector<std::string>{"2% cotton shirt"});
    CHECK(chunker.chunks({"red", "the", "coat"}) == std::vector<std::string>{"the coat"});
}

TEST_CASE("noun chunk extraction") {
    CHECK(texts_of(extract({"a red dress"})) == std::vector<std::string>{"red dress"});
    CHECK(texts_of(extract({"red dresses", "red dress"})) == std::vector<std::string>{"red dress"});
    CHECK(texts_of(extract({"The navy blazer with gold buttons."})) ==
          std::vector<std::string>{"navy blazer", "gold button"});
    // The chunker keeps "2% cotton shirt"; the special-character filter drops it.
    CHECK(texts_of(extract({"2% cotton shirt", "50% off!"})).empty());
    CHECK(extract({}).empty());
    std::vector<Caption> mixed{{"red dress", Category::upper}, {"red dress", Category::lower}};
    const SuffixLemmatizer lem;
    const LexiconChunker chunker;
    CHECK(extract_noun_chunks(mixed, lem, chunker).size() == 2);
}

TEST_CASE("extraction on synthetic captions is sound and idempotent") {
    const auto samples = synthetic::make_garment_set(40, 32, 24, 3);
    std::vector<Caption> captions;
    for (const auto& s : samples) captions.push_back({s.caption, parse_category(s.category)});
    const SuffixLemmatizer lem;
    const LexiconChunker chunker;
    const auto chunks = extract_noun_chunks(captions, lem, chunker);
    CHECK(chunks.size() >= 20);
    std::set<std::string> texts;
    for (const auto& c : chunks) {
        CHECK(is_valid_chunk(c.text));
        texts.insert(c.text);
    }
    // Every short garment description survives as a chunk.
    for (const auto& s : samples) CHECK(texts.count(s.text) == 1);
    std::vector<Caption> again;
    for (const auto& c : chunks) again.push_back({c.text, c.category});
    CHECK(extract_noun_chunks(again, lem, chunker) == chunks);
}

TEST_CASE("prompt templates") {
    const auto& set = PromptTemplateSet::standard();
    REQUIRE(set.templates().size() == 17);
    CHECK(set.templates().front() == "a photo of a [noun chunk]");
    CHECK(set.templates()[13] == "a high-resolution photo of a [noun chunk]");
    CHECK(set.templates().back() == "a photo of one [noun chunk]");
    CHECK(set.fill(3, "red dress") == "a photo of an expensive red dress");
    for (const auto& t : set.templates()) {
        const auto p = t.find(PromptTemplateSet::kPlaceholder);
        REQUIRE(p != std::string::npos);
        CHECK(t.find(PromptTemplateSet::kPlaceholder, p + 1) == std::string::npos);
    }
    CHECK_THROWS_AS(PromptTemplateSet({"no placeholder"}), InputError);
    CHECK_THROWS_AS(PromptTemplateSet({"[noun chunk] and [noun chunk]"}), InputError);
}

TEST_CASE("ensemble embedding") {
    const ConstantEmbedder constant;
    const auto e = ensemble_embed("red dress", PromptTemplateSet::standard(), constant);
    CHECK(e[0] == doctest::Approx(0.6));
    CHECK(e[1] == 0.0);
    CHECK(e[2] == doctest::Approx(0.8));

    const metrics::ToyClipEmbedder toy;
    const auto a = ensemble_embed("red striped shirt", PromptTemplateSet::standard(), toy);
    CHECK(a == ensemble_embed("red striped shirt", PromptTemplateSet::standard(), toy));
    double n = 0.0;
    for (double x : a) n += x * x;
    CHECK(n == doctest::Approx(1.0));

    const PromptTemplateSet one({"a photo of a [noun chunk]"});
    const auto single = ensemble_embed("blue skirt", one, toy);
    auto direct = toy.embed_text("a photo of a blue skirt");
    double dn = 0.0;
    for (double x : direct) dn += x * x;
    for (std::size_t i = 0; i < direct.size(); ++i) CHECK(single[i] == doctest::Approx(direct[i] / std::sqrt(dn)));
}

TEST_CASE("cosine") {
    CHECK(cosine({1, 0}, {0, 1}) == 0.0);
    CHECK(cosine({1, 1}, {2, 2}) == doctest::Approx(1.0));
    CHECK(cosine({3, 4}, {4, 3}) == doctest::Approx(24.0 / 25.0));
    CHECK(cosine({0, 0}, {1, 0}) == 0.0);
    CHECK_THROWS_AS(cosine({1}, {1, 2}), InputError);
}

TEST_CASE("disjoint top-5 sets give exactly their union in model order") {
    std::vector<std::string> chunks;
    for (int i = 0; i < 30; ++i) chunks.push_back("chunk " + std::to_string(100 + i));
    std::vector<ModelScores> models(5);
    for (int m = 0; m < 5; ++m) {
        models[static_cast<std::size_t>(m)].image_vec = {1.0, 0.0};
        for (int i = 0; i < 30; ++i) {
            // Model m prefers chunks 5m..5m+4, strongest first.
            const bool mine = i / 5 == m;
            const double angle = mine ? 0.1 * (i % 5) : 1.5;
            models[static_cast<std::size_t>(m)].chunk_vecs.push_back({std::cos(angle), std::sin(angle)});
        }
    }
    const auto got = rank_candidates(chunks, models);
    REQUIRE(got.size() == 25u);
    for (int i = 0; i < 25; ++i) CHECK(got[static_cast<std::size_t>(i)] == chunks[static_cast<std::size_t>(i)]);
}

TEST_CASE("single model, k = 1 ranks the argmax first") {
    const std::vector<std::string> chunks{"y", "x"};
    const std::vector<ModelScores> models{{{1.0, 0.0}, {{0.1, std::sqrt(1 - 0.01)}, {0.9, std::sqrt(1 - 0.81)}}}};
    CHECK(rank_candidates(chunks, models, {1, 2}) == std::vector<std::string>{"x", "y"});
    CHECK(rank_candidates(chunks, models, {1, 1}) == std::vector<std::string>{"x"});
}

TEST_CASE("ranking matches the brute-force oracle on 40 chunks x 3 models") {
    Rng rng(2026);
    for (int trial = 0; trial < 200; ++trial) {
        CAPTURE(trial);
        const int dim = rng.uniform_int(2, 4);
        std::vector<std::string> chunks;
        for (int i = 0; i < 40; ++i) chunks.push_back("c" + std::to_string(rng.uniform_int(0, 99)));
        std::set<std::string> distinct(chunks.begin(), chunks.end());
        std::vector<ModelScores> models(3);
        for (auto& m : models) {
            m.image_vec = coarse_vector(rng, dim);
            for (int i = 0; i < 40; ++i) m.chunk_vecs.push_back(coarse_vector(rng, dim));
        }
        const int k = rng.uniform_int(1, 9);
        const int target = std::min<int>(rng.uniform_int(5, 25), static_cast<int>(distinct.size()));
        const auto got = rank_candidates(chunks, models, {k, target});
        CHECK(got == oracle_rank(chunks, models, k, target));

        // Reordering the input does not change the result.
        std::vector<std::size_t> perm(40);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        // Only permute among first occurrences' relative order when texts are
        // unique; with duplicates the first occurrence defines the vector.
        if (distinct.size() == 40) {
            std::vector<std::string> pc;
            std::vector<ModelScores> pm(3);
            for (std::size_t i : perm) pc.push_back(chunks[i]);
            for (std::size_t m = 0; m < 3; ++m) {
                pm[m].image_vec = models[m].image_vec;
                for (std::size_t i : perm) pm[m].chunk_vecs.push_back(models[m].chunk_vecs[i]);
            }
            CHECK(rank_candidates(pc, pm, {k, target}) == got);
        }

        // Every model's top-k is in the result when the union fits.
        if (k * 3 <= target) {
            const std::set<std::string> members(got.begin(), got.end());
            CHECK(members.size() == got.size());
            for (const auto& m : models) {
                const auto top = oracle_rank(chunks, {m}, k, k);
                for (const auto& t : top) CHECK(members.count(t) == 1);
            }
        }
    }
}

TEST_CASE("ranking reports the shortfall") {
    std::vector<std::string> chunks{"a1", "b1", "b1"};
    const std::vector<ModelScores> models{{{1.0}, {{1.0}, {1.0}, {1.0}}}};
    try {
        (void)rank_candidates(chunks, models, {5, 25});
        FAIL("expected an error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()) == "need 25 distinct noun chunks, got 2 (short by 23)");
    }
}

TEST_CASE("rank_candidates with embedders") {
    StubEmbedder a, b;
    std::vector<std::string> chunks;
    for (int i = 0; i < 6; ++i) {
        chunks.push_back("item " + std::to_string(i));
        a.text[chunks.back()] = {1.0, static_cast<double>(i)};
        b.text[chunks.back()] = {1.0, static_cast<double>(-i)};
    }
    a.images = {{0.0, 1.0}};
    b.images = {{0.0, 1.0}};
    const auto got = rank_candidates(image_id(0), chunks, {&a, &b}, identity_templates(), {2, 5});
    CHECK(got == std::vector<std::string>{"item 5", "item 4", "item 0", "item 1", "item 3"});
}

TEST_CASE("coarse tagging") {
    StubEmbedder e;
    e.images = {{1.0, 0.0, 0.0, 0.0}};
    std::vector<NounChunk> table{{"u one", Category::upper},
                                 {"u two", Category::upper},
                                 {"u three", Category::upper},
                                 {"l one", Category::lower}};
    e.text["u one"] = {0.2, 1.0, 0.0, 0.0};
    e.text["u two"] = {0.9, 0.0, 1.0, 0.0};
    e.text["u three"] = {0.5, 0.0, 0.0, 1.0};
    e.text["l one"] = {1.0, 0.0, 0.0, 0.0};
    const auto got = coarse_tag(image_id(0), Category::upper, table, e, identity_templates());
    CHECK(texts_of(got) == std::vector<std::string>{"u two", "u three", "u one"});
    CHECK_THROWS_AS(coarse_tag(image_id(0), Category::lower, table, e, identity_templates()), InputError);
    CHECK_THROWS_AS(coarse_tag(image_id(0), Category::dresses, table, e, identity_templates()), InputError);

    // Orthogonal chunk vectors, exhaustive oracle on the dot products.
    Rng rng(7);
    StubEmbedder ortho;
    std::vector<NounChunk> big;
    const int n = 12;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(n, 0.0);
        v[static_cast<std::size_t>(i)] = 1.0;
        const std::string name = "chunk " + std::string(1, static_cast<char>('a' + i));
        ortho.text[name] = v;
        big.push_back({name, i % 4 == 3 ? Category::lower : Category::upper});
    }
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> img(n);
        for (auto& x : img) x = rng.uniform_int(0, 4);
        ortho.images = {img};
        std::vector<std::pair<double, std::string>> oracle;
        for (int i = 0; i < n; ++i) {
            if (big[static_cast<std::size_t>(i)].category != Category::upper) continue;
            oracle.emplace_back(-img[static_cast<std::size_t>(i)], big[static_cast<std::size_t>(i)].text);
        }
        std::sort(oracle.begin(), oracle.end());
        const auto tags = coarse_tag(image_id(0), Category::upper, big, ortho, identity_templates());
        REQUIRE(tags.size() == 3u);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(tags[i].text == oracle[i].second);
            CHECK(tags[i].category == Category::upper);
        }
    }
}

TEST_CASE("top-k accuracy extremes") {
    StubEmbedder e;
    std::vector<std::string> pool;
    std::vector<LabeledPair> pairs;
    const int n = 5;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(n, 0.0);
        v[static_cast<std::size_t>(i)] = 1.0;
        pool.push_back("chunk " + std::to_string(i));
        e.text[pool.back()] = v;
        e.images.push_back(v);
        pairs.push_back({image_id(i), pool.back()});
    }
    CHECK(topk_accuracy(e, pairs, pool, identity_templates(), 3) == 1.0);
    // Image i orthogonal to chunk i, aligned with every other chunk.
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(n, 1.0);
        v[static_cast<std::size_t>(i)] = 0.0;
        e.images[static_cast<std::size_t>(i)] = v;
    }
    CHECK(topk_accuracy(e, pairs, pool, identity_templates(), 3) == 0.0);
    CHECK_THROWS_AS(topk_accuracy(e, {}, pool, identity_templates(), 3), InputError);
}

TEST_CASE("linear projection fine-tuning improves top-k accuracy") {
    // Image embeddings are a fixed rotation of the chunk embeddings, so the
    // base embedder ranks poorly and a linear map can undo it exactly.
    Rng rng(11);
    const int d = 6, n = 12;
    StubEmbedder e;
    std::vector<std::string> pool;
    std::vector<LabeledPair> pairs;
    for (int i = 0; i < n; ++i) {
        std::vector<double> t(d);
        for (auto& x : t) x = rng.normal();
        pool.push_back("chunk " + std::to_string(i));
        e.text[pool.back()] = t;
        std::vector<double> img(d);
        for (int j = 0; j < d; ++j) img[static_cast<std::size_t>(j)] = t[static_cast<std::size_t>((j + 2) % d)];
        e.images.push_back(img);
        pairs.push_back({image_id(i), pool.back()});
    }
    const double before = topk_accuracy(e, pairs, pool, identity_templates(), 1);
    const auto tuned = LinearProjectionTrainer(1e-6).fine_tune(e, pairs, identity_templates());
    const double after = topk_accuracy(*tuned, pairs, pool, identity_templates(), 1);
    MESSAGE("top-1 accuracy " << before << " -> " << after);
    CHECK(before < 0.5);
    CHECK(after == 1.0);
    CHECK(tuned->embed_text("chunk 3") == e.embed_text("chunk 3"));
}

TEST_CASE("JSONL formats round-trip") {
    std::istringstream corpus(
        "{\"caption\": \"a red dress\", \"category\": \"dresses\"}\n\n{\"caption\": \"blue jeans\", \"category\": "
        "\"lower\"}\n");
    const auto captions = read_corpus(corpus);
    REQUIRE(captions.size() == 2);
    CHECK(captions[1].category == Category::lower);

    std::istringstream bad("{\"caption\": \"x\", \"category\": \"hats\"}\n");
    CHECK_THROWS_AS(read_corpus(bad), InputError);
    std::istringstream broken("{\"caption\": \n");
    CHECK_THROWS_AS(read_corpus(broken), InputError);

    const std::vector<NounChunk> table{{"red dress", Category::dresses}, {"blue jeans", Category::lower}};
    std::stringstream ts;
    write_chunk_table(ts, table);
    CHECK(read_chunk_table(ts) == table);

    std::vector<CandidateRecord> cands{{"item-1", {"a1", "b2"}}};
    std::stringstream cs;
    write_candidates(cs, cands);
    const auto back = read_candidates(cs);
    CHECK(back[0].item_id == "item-1");
    CHECK(back[0].candidates == cands[0].candidates);

    AnnotationRecord r{"item-1", {"red dress", "long sleeve", "cotton"}, Source::manual, "ann-3", "2026-10-16T12:00:00Z"};
    const auto line = record_to_json(r);
    const auto rb = record_from_json(line);
    CHECK(rb.chunks == r.chunks);
    CHECK(rb.source == Source::manual);
    CHECK(rb.annotator_id == "ann-3");
    r.chunks[2] = "red dress";
    CHECK_THROWS_AS(r.validate(), InputError);
    r.chunks[2] = "50% off";
    CHECK_THROWS_AS(r.validate(), InputError);
    CHECK_THROWS_AS(record_from_json("{\"item_id\":\"x\",\"chunks\":[\"a1\"],\"source\":\"selected\","
                                     "\"annotator_id\":\"a\",\"timestamp\":\"t\"}"),
                    InputError);
}

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>

#include "uvl/corpus.hpp"

using namespace uvl;
namespace fs = std::filesystem;

namespace {

CorpusSpec tiny_spec() {
    CorpusSpec s;
    s.num_videos = 4;
    s.val_videos = 2;
    s.clips_per_video = 3;
    s.tokens_min = 4;
    s.tokens_max = 8;
    s.frames_min = 5;
    s.frames_max = 9;
    s.concepts = 6;
    s.feature_dim = 8;
    s.noise_sigma = 0.05;
    s.temporal_offset_prob = 0.2;
    s.seed = 42;
    return s;
}

void check_pairs_equal(const ClipTextPair& a, const ClipTextPair& b) {
    CHECK(a.video_id == b.video_id);
    CHECK(a.clip_index == b.clip_index);
    CHECK(a.tokens == b.tokens);
    CHECK(a.text_real == b.text_real);
    CHECK(a.video_real == b.video_real);
    CHECK(a.text == b.text);
    CHECK(a.caption == b.caption);
    CHECK(a.frame_labels == b.frame_labels);
    CHECK(a.sentiment == b.sentiment);
    REQUIRE(a.frames.shape == b.frames.shape);
    CHECK(*a.frames.data == *b.frames.data);
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        CHECK(a.steps[i].concept_id == b.steps[i].concept_id);
        CHECK(a.steps[i].begin == b.steps[i].begin);
        CHECK(a.steps[i].end == b.steps[i].end);
        CHECK(a.steps[i].description == b.steps[i].description);
    }
}

void check_corpora_equal(const Corpus& a, const Corpus& b) {
    CHECK(a.vocab.id_to_token == b.vocab.id_to_token);
    REQUIRE(a.train.size() == b.train.size());
    REQUIRE(a.val.size() == b.val.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) check_pairs_equal(a.train[i], b.train[i]);
    for (std::size_t i = 0; i < a.val.size(); ++i) check_pairs_equal(a.val[i], b.val[i]);
}

// concept mentions in a transcript, in order
std::vector<std::string> concept_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w)
        if (w.rfind("act", 0) == 0) out.push_back(w);
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / tag) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

} // namespace

TEST_CASE("generation is deterministic and seed-sensitive") {
    const CorpusSpec spec = tiny_spec();
    const Corpus a = generate_corpus(spec);
    const Corpus b = generate_corpus(spec);
    check_corpora_equal(a, b);
    CHECK(a.train.size() == 12);
    CHECK(a.val.size() == 6);

    CorpusSpec other = spec;
    other.seed = 43;
    const Corpus c = generate_corpus(other);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.train.size() && !any_diff; ++i)
        any_diff = a.train[i].text != c.train[i].text ||
                   *a.train[i].frames.data != *c.train[i].frames.data;
    CHECK(any_diff);
}

TEST_CASE("generated pairs satisfy the structural contract") {
    const CorpusSpec spec = tiny_spec();
    const Corpus corpus = generate_corpus(spec);
    const ModelConfig cfg; // desk caps

    for (const auto* split : {&corpus.train, &corpus.val}) {
        for (const auto& p : *split) {
            REQUIRE_NOTHROW(p.check(cfg));
            CHECK(p.tokens.size() <= spec.tokens_max + 2);
            CHECK(p.tokens.front() == cfg.cls_id);
            CHECK(p.tokens.back() == cfg.sep_id);
            CHECK(p.frames.shape[0] >= spec.frames_min);
            CHECK(p.frames.shape[0] <= spec.frames_max);
            CHECK(p.frames.shape[1] == spec.feature_dim);
            CHECK(p.frame_labels.size() == p.frames.shape[0]);
            CHECK(p.sentiment >= -3.0);
            CHECK(p.sentiment <= 3.0);
            REQUIRE_FALSE(p.steps.empty());
            CHECK(p.steps.size() <= 4);

            // steps tile the clip and agree with the per-frame labels
            std::size_t cursor = 0;
            for (const auto& s : p.steps) {
                CHECK(s.begin == cursor);
                REQUIRE(s.end > s.begin);
                for (std::size_t f = s.begin; f < s.end; ++f)
                    CHECK(p.frame_labels[f] == s.concept_id);
                cursor = s.end;
            }
            CHECK(cursor == p.frames.shape[0]);

            // caption is the ordered step descriptions
            const auto caption = split_words(p.caption);
            REQUIRE(caption.size() == p.steps.size());
            for (std::size_t i = 0; i < caption.size(); ++i)
                CHECK(caption[i] == p.steps[i].description);
        }
    }
}

TEST_CASE("vocabulary reserves the special ids and sorts the rest") {
    const Corpus corpus = generate_corpus(tiny_spec());
    const auto& v = corpus.vocab;
    CHECK(v.token(0) == "[PAD]");
    CHECK(v.token(1) == "[CLS]");
    CHECK(v.token(2) == "[SEP]");
    CHECK(v.token(3) == "[MASK]");
    CHECK(v.token(4) == "[BOS]");
    CHECK(v.token(5) == "[EOS]");
    for (std::size_t i = 7; i < v.size(); ++i) CHECK(v.id_to_token[i - 1] < v.id_to_token[i]);
    CHECK(v.size() == 6 + 8 + 6); // specials + function words + concepts
    CHECK(v.id("act00") >= 6);
    CHECK_THROWS_AS(v.id("zzz"), DataError);
    CHECK_THROWS_WITH(v.id("zzz"), Catch::Matchers::ContainsSubstring("zzz"));
    CHECK_THROWS_AS(v.token(-1), DataError);
    CHECK_THROWS_AS(v.token(static_cast<int>(v.size())), DataError);
}

TEST_CASE("text round-trips through tokenize and detokenize") {
    const Corpus corpus = generate_corpus(tiny_spec());
    for (const auto& p : corpus.train) {
        CHECK(detokenize(tokenize(p.text, corpus.vocab), corpus.vocab) == p.text);
        CHECK(detokenize(tokenize(p.caption, corpus.vocab), corpus.vocab) == p.caption);
    }
    CHECK(tokenize("", corpus.vocab).empty());
    CHECK(detokenize({}, corpus.vocab).empty());
}

TEST_CASE("zero noise puts every frame exactly on its concept anchor") {
    CorpusSpec spec = tiny_spec();
    spec.noise_sigma = 0.0;
    const Corpus corpus = generate_corpus(spec);
    const auto anchors = detail::concept_anchors(spec);
    for (const auto& p : corpus.train)
        for (std::size_t f = 0; f < p.frames.shape[0]; ++f) {
            const auto& a = anchors[static_cast<std::size_t>(p.frame_labels[f])];
            for (std::size_t c = 0; c < spec.feature_dim; ++c) CHECK(p.frames.at(f, c) == a[c]);
        }
}

TEST_CASE("nearest anchor recovers the frame labels under default noise") {
    const CorpusSpec spec = tiny_spec();
    const Corpus corpus = generate_corpus(spec);
    const auto anchors = detail::concept_anchors(spec);
    for (const auto& p : corpus.train)
        for (std::size_t f = 0; f < p.frames.shape[0]; ++f) {
            int best = -1;
            double best_d = 0;
            for (std::size_t c = 0; c < anchors.size(); ++c) {
                double d = 0;
                for (std::size_t j = 0; j < spec.feature_dim; ++j) {
                    const double diff = p.frames.at(f, j) - anchors[c][j];
                    d += diff * diff;
                }
                if (best < 0 || d < best_d) {
                    best = static_cast<int>(c);
                    best_d = d;
                }
            }
            CHECK(best == p.frame_labels[f]);
        }
}

TEST_CASE("transcript misalignment matches the requested probability") {
    CorpusSpec spec = tiny_spec();
    spec.num_videos = 600;
    spec.val_videos = 0;
    spec.clips_per_video = 4;
    spec.temporal_offset_prob = 0.3;
    const Corpus corpus = generate_corpus(spec);

    // a clip is misaligned when its transcript's concept mentions differ from
    // its own caption (neighbor captions rarely coincide, bias < 0.01)
    std::size_t off = 0;
    for (const auto& p : corpus.train)
        if (concept_words(p.text) != split_words(p.caption)) ++off;
    const double frac = static_cast<double>(off) / static_cast<double>(corpus.train.size());
    CHECK(frac == Catch::Approx(0.3).margin(0.03));

    CorpusSpec none = tiny_spec();
    none.temporal_offset_prob = 0.0;
    for (const auto& p : generate_corpus(none).train)
        CHECK(concept_words(p.text) == split_words(p.caption));
}

TEST_CASE("corpus round-trips through the on-disk layout") {
    const Corpus corpus = generate_corpus(tiny_spec());
    TempDir dir("uvl_corpus_roundtrip");
    write_corpus(corpus, dir.str());

    CHECK(fs::exists(dir.path / "corpus_meta.json"));
    CHECK(fs::exists(dir.path / "vocab.txt"));
    CHECK(fs::exists(dir.path / "transcripts.jsonl"));
    CHECK(fs::exists(dir.path / "features" / "vid0000.uvlf"));

    const Corpus loaded = load_corpus(dir.str());
    check_corpora_equal(corpus, loaded);
    CHECK(loaded.spec.seed == corpus.spec.seed);
    CHECK(loaded.spec.noise_sigma == corpus.spec.noise_sigma);
    CHECK(loaded.spec.num_videos == corpus.spec.num_videos);

    // writing again produces byte-identical files
    TempDir dir2("uvl_corpus_roundtrip2");
    write_corpus(loaded, dir2.str());
    for (const char* name : {"corpus_meta.json", "vocab.txt", "transcripts.jsonl"})
        CHECK(read_file_bytes((dir.path / name).string()) ==
              read_file_bytes((dir2.path / name).string()));
    CHECK(read_file_bytes((dir.path / "features" / "vid0001.uvlf").string()) ==
          read_file_bytes((dir2.path / "features" / "vid0001.uvlf").string()));
}

TEST_CASE("hand-written single-pair corpus loads back intact") {
    Corpus corpus;
    corpus.spec = tiny_spec();
    corpus.spec.num_videos = 1;
    corpus.spec.val_videos = 0;
    corpus.spec.clips_per_video = 1;
    corpus.vocab = Vocabulary::build({"act00", "the", "we"});

    ClipTextPair p;
    p.video_id = "vid0000";
    p.clip_index = 0;
    p.text = "we act00 the";
    p.caption = "act00";
    p.tokens = {1, corpus.vocab.id("we"), corpus.vocab.id("act00"), corpus.vocab.id("the"), 2};
    p.text_real.assign(5, 1);
    p.frames = Tensor::from_values({2, 8}, {1, 2, 3, 4, 5, 6, 7, 8, 8, 7, 6, 5, 4, 3, 2, 1});
    p.video_real.assign(2, 1);
    p.frame_labels = {0, 0};
    ClipTextPair::StepSpan span;
    span.concept_id = 0;
    span.begin = 0;
    span.end = 2;
    span.description = "act00";
    p.steps.push_back(span);
    p.sentiment = -1.25;
    corpus.train.push_back(p);

    TempDir dir("uvl_corpus_manual");
    write_corpus(corpus, dir.str());
    const Corpus loaded = load_corpus(dir.str());
    REQUIRE(loaded.train.size() == 1);
    CHECK(loaded.val.empty());
    check_pairs_equal(loaded.train[0], p);
}

TEST_CASE("corrupted corpus files are reported, not parsed") {
    const Corpus corpus = generate_corpus(tiny_spec());
    TempDir dir("uvl_corpus_corrupt");
    write_corpus(corpus, dir.str());
    const std::string feat = (dir.path / "features" / "vid0000.uvlf").string();
    const std::string good = read_file_bytes(feat);

    SECTION("flipped byte fails the checksum") {
        std::string bad = good;
        bad[bad.size() / 2] ^= 0x40;
        write_file_bytes(feat, bad);
        CHECK_THROWS_WITH(load_corpus(dir.str()),
                          Catch::Matchers::ContainsSubstring("checksum mismatch"));
    }
    SECTION("truncation is caught before the checksum") {
        write_file_bytes(feat, good.substr(0, good.size() / 2));
        CHECK_THROWS_AS(load_corpus(dir.str()), IoError);
    }
    SECTION("wrong magic is not a feature file") {
        std::string bad = good;
        bad[0] = 'X';
        write_file_bytes(feat, bad);
        CHECK_THROWS_WITH(load_corpus(dir.str()),
                          Catch::Matchers::ContainsSubstring("not a feature file"));
    }
    SECTION("missing features for a transcript") {
        fs::remove(feat);
        CHECK_THROWS_WITH(load_corpus(dir.str()),
                          Catch::Matchers::ContainsSubstring("no features for vid0000"));
    }
    SECTION("broken JSONL line is pinpointed") {
        const std::string tpath = (dir.path / "transcripts.jsonl").string();
        std::string jsonl = read_file_bytes(tpath);
        jsonl.insert(jsonl.find('\n') + 1, "{broken\n");
        write_file_bytes(tpath, jsonl);
        CHECK_THROWS_WITH(load_corpus(dir.str()), Catch::Matchers::ContainsSubstring(":2:"));
    }
    SECTION("unsupported feature version") {
        std::string body = good.substr(0, good.size() - 4);
        body[4] = 9; // version lives right after the magic
        put_u32(body, crc32(body));
        write_file_bytes(feat, body);
        CHECK_THROWS_WITH(load_corpus(dir.str()),
                          Catch::Matchers::ContainsSubstring("version 9"));
    }
}

TEST_CASE("spec validation rejects impossible corpora") {
    CorpusSpec s = tiny_spec();
    s.tokens_max = 40; // cannot fit n_max = 32 with CLS/SEP
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = tiny_spec();
    s.frames_max = 100;
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = tiny_spec();
    s.concepts = 250; // 250 + 14 > 256
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = tiny_spec();
    s.temporal_offset_prob = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = tiny_spec();
    s.tokens_min = 9;
    s.tokens_max = 8;
    CHECK_THROWS_AS(s.validate(), ConfigError);

    s = tiny_spec();
    s.noise_sigma = -0.1;
    CHECK_THROWS_AS(s.validate(), ConfigError);

    CHECK_NOTHROW(tiny_spec().validate());
}

TEST_CASE("split accessor knows train and val only") {
    const Corpus corpus = generate_corpus(tiny_spec());
    CHECK(&corpus.split("train") == &corpus.train);
    CHECK(&corpus.split("val") == &corpus.val);
    CHECK_THROWS_AS(corpus.split("test"), ConfigError);
}

TEST_CASE("vocabulary file must keep the reserved prefix") {
    CHECK_THROWS_AS(Vocabulary::from_lines({"[PAD]", "[CLS]"}), DataError);
    CHECK_THROWS_AS(Vocabulary::from_lines({"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[BOS]",
                                            "[EOS]", "dup", "dup"}),
                    DataError);
    const auto v = Vocabulary::from_lines({"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[BOS]",
                                           "[EOS]", "alpha"});
    CHECK(v.id("alpha") == 6);
}

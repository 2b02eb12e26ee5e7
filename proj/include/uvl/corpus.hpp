#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uvl/masking.hpp"
#include "uvl/model.hpp"
#include "uvl/serial.hpp"

namespace uvl {

/// Knobs of the synthetic generator. `temporal_offset_prob` is the chance a
/// clip's transcript is reassigned to describe a neighboring clip, imitating
/// narration that runs ahead of or behind the action.
struct CorpusSpec {
    std::size_t num_videos = 8;
    std::size_t val_videos = 4;  // extra held-out videos, same recipe
    std::size_t clips_per_video = 4;
    std::size_t tokens_min = 4, tokens_max = 10;  // transcript length before CLS/SEP
    std::size_t frames_min = 6, frames_max = 12;
    std::size_t concepts = 16;
    std::size_t feature_dim = 32;
    double noise_sigma = 0.05;
    double temporal_offset_prob = 0.2;
    std::uint64_t seed = 1;

    void validate(std::size_t n_max = 32, std::size_t m_max = 48,
                  std::size_t vocab_capacity = 256) const {
        if (num_videos == 0 || clips_per_video == 0)
            throw ConfigError("corpus spec: need at least one video and one clip per video");
        if (tokens_min == 0 || tokens_min > tokens_max)
            throw ConfigError("corpus spec: bad token range [" + std::to_string(tokens_min) + ", " +
                              std::to_string(tokens_max) + "]");
        // a clip can carry up to 4 step descriptions, so transcripts need that much room
        if (tokens_max < 4)
            throw ConfigError("corpus spec: tokens_max must be at least 4");
        if (frames_min == 0 || frames_min > frames_max)
            throw ConfigError("corpus spec: bad frame range [" + std::to_string(frames_min) + ", " +
                              std::to_string(frames_max) + "]");
        if (tokens_max + 2 > n_max)
            throw ConfigError("corpus spec: tokens_max " + std::to_string(tokens_max) +
                              " plus CLS/SEP exceeds n_max " + std::to_string(n_max));
        if (frames_max > m_max)
            throw ConfigError("corpus spec: frames_max " + std::to_string(frames_max) +
                              " exceeds m_max " + std::to_string(m_max));
        if (concepts == 0) throw ConfigError("corpus spec: need at least one concept");
        // 6 specials + function words must still fit alongside the concepts
        if (concepts + 6 + 8 > vocab_capacity)
            throw ConfigError("corpus spec: " + std::to_string(concepts) +
                              " concepts do not fit a vocabulary of " +
                              std::to_string(vocab_capacity));
        if (feature_dim == 0) throw ConfigError("corpus spec: feature_dim must be positive");
        if (noise_sigma < 0) throw ConfigError("corpus spec: noise_sigma must be >= 0");
        if (temporal_offset_prob < 0 || temporal_offset_prob > 1)
            throw ConfigError("corpus spec: temporal_offset_prob must be in [0, 1]");
    }
};

inline nlohmann::ordered_json corpus_spec_to_json(const CorpusSpec& s) {
    return nlohmann::ordered_json{{"num_videos", s.num_videos},
                                  {"val_videos", s.val_videos},
                                  {"clips_per_video", s.clips_per_video},
                                  {"tokens_min", s.tokens_min},
                                  {"tokens_max", s.tokens_max},
                                  {"frames_min", s.frames_min},
                                  {"frames_max", s.frames_max},
                                  {"concepts", s.concepts},
                                  {"feature_dim", s.feature_dim},
                                  {"noise_sigma", s.noise_sigma},
                                  {"temporal_offset_prob", s.temporal_offset_prob},
                                  {"seed", s.seed}};
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
    CorpusSpec s;
    s.num_videos = j.at("num_videos").get<std::size_t>();
    s.val_videos = j.value("val_videos", std::size_t{0});
    s.clips_per_video = j.at("clips_per_video").get<std::size_t>();
    s.tokens_min = j.at("tokens_min").get<std::size_t>();
    s.tokens_max = j.at("tokens_max").get<std::size_t>();
    s.frames_min = j.at("frames_min").get<std::size_t>();
    s.frames_max = j.at("frames_max").get<std::size_t>();
    s.concepts = j.at("concepts").get<std::size_t>();
    s.feature_dim = j.at("feature_dim").get<std::size_t>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.temporal_offset_prob = j.at("temporal_offset_prob").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

/// Bijective token <-> id map with the reserved ids 0-5 fixed.
struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::map<std::string, int> token_to_id;

    static const std::vector<std::string>& special_tokens() {
        static const std::vector<std::string> s{"[PAD]", "[CLS]", "[SEP]",
                                                "[MASK]", "[BOS]", "[EOS]"};
        return s;
    }

    /// Specials first at their fixed ids, then the corpus tokens sorted and
    /// de-duplicated — deterministic for a given token set.
    static Vocabulary build(const std::set<std::string>& corpus_tokens) {
        Vocabulary v;
        for (const auto& t : special_tokens()) v.push(t);
        for (const auto& t : corpus_tokens) {
            if (v.token_to_id.count(t))
                throw DataError("vocabulary: corpus token '" + t + "' collides with a reserved token");
            v.push(t);
        }
        return v;
    }

    static Vocabulary from_lines(const std::vector<std::string>& lines) {
        Vocabulary v;
        for (const auto& t : lines) {
            if (v.token_to_id.count(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
            v.push(t);
        }
        for (std::size_t i = 0; i < special_tokens().size(); ++i)
            if (i >= v.id_to_token.size() || v.id_to_token[i] != special_tokens()[i])
                throw DataError("vocabulary: reserved token id " + std::to_string(i) +
                                " must be " + special_tokens()[i]);
        return v;
    }

    int id(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        if (it == token_to_id.end()) throw DataError("unknown token '" + tok + "'");
        return it->second;
    }

    const std::string& token(int i) const {
        if (i < 0 || static_cast<std::size_t>(i) >= id_to_token.size())
            throw DataError("token id " + std::to_string(i) + " outside vocabulary of size " +
                            std::to_string(id_to_token.size()));
        return id_to_token[static_cast<std::size_t>(i)];
    }

    std::size_t size() const { return id_to_token.size(); }

private:
    void push(const std::string& t) {
        token_to_id[t] = static_cast<int>(id_to_token.size());
        id_to_token.push_back(t);
    }
};

inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) ids.push_back(vocab.id(tok));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

/// One aligned (transcript, clip) training example plus every ground-truth
/// annotation the downstream tasks need.
struct ClipTextPair {
    std::string video_id;
    std::size_t clip_index = 0;
    std::vector<int> tokens;  // [CLS] transcript [SEP]
    BoolVec text_real;
    Tensor frames;  // m x d_f
    BoolVec video_real;

    std::string text;     // transcript as written (possibly offset to a neighbor clip)
    std::string caption;  // clean ground-truth description of THIS clip
    std::vector<int> frame_labels;
    struct StepSpan {
        int concept_id = 0;
        std::size_t begin = 0, end = 0;  // frame interval [begin, end)
        std::string description;
    };
    std::vector<StepSpan> steps;
    double sentiment = 0.0;

    void check(const ModelConfig& cfg) const {
        if (tokens.empty() || tokens[0] != cfg.cls_id)
            throw DataError("pair " + video_id + "#" + std::to_string(clip_index) +
                            ": tokens must start with CLS");
        std::size_t seps = 0, last_real = 0;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (!text_real[i]) continue;
            if (tokens[i] == cfg.sep_id) seps++;
            last_real = i;
        }
        if (seps != 1 || tokens[last_real] != cfg.sep_id)
            throw DataError("pair " + video_id + "#" + std::to_string(clip_index) +
                            ": exactly one SEP must terminate the real tokens");
        for (std::size_t i = 0; i < frames.numel(); ++i)
            if (!std::isfinite(frames.at(i)))
                throw DataError("pair " + video_id + "#" + std::to_string(clip_index) +
                                ": non-finite frame feature");
    }
};

struct Corpus {
    CorpusSpec spec;
    Vocabulary vocab;
    std::vector<ClipTextPair> train, val;

    const std::vector<ClipTextPair>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        throw ConfigError("unknown corpus split '" + name + "' (use train or val)");
    }
};

namespace detail {

inline std::string concept_token(std::size_t c) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "act%02zu", c);
    return buf;
}

inline const std::vector<std::string>& function_words() {
    static const std::vector<std::string> w{"the", "a", "to", "we", "then", "now", "and", "so"};
    return w;
}

/// Concept anchor vectors: unit-scale gaussian points in feature space,
/// derived only from the corpus seed.
inline std::vector<std::vector<double>> concept_anchors(const CorpusSpec& spec) {
    std::vector<std::vector<double>> anchors(spec.concepts);
    for (std::size_t c = 0; c < spec.concepts; ++c) {
        RngStream rng = RngStream::derive(spec.seed, "anchor", c);
        anchors[c].resize(spec.feature_dim);
        for (double& v : anchors[c]) v = rng.gaussian();
    }
    return anchors;
}

inline double sentiment_rule(const std::vector<int>& step_concepts, std::size_t total_concepts,
                             RngStream& rng) {
    double s = 0.0;
    if (!step_concepts.empty() && total_concepts > 1) {
        for (int c : step_concepts)
            s += -3.0 + 6.0 * static_cast<double>(c) / static_cast<double>(total_concepts - 1);
        s /= static_cast<double>(step_concepts.size());
    }
    s += rng.gaussian(0.0, 0.25);
    return std::clamp(s, -3.0, 3.0);
}

} // namespace detail

/// Deterministically generate the paired corpus. Each clip gets 1-4 concept
/// steps; frames are that concept's anchor plus gaussian noise; transcripts
/// are the step tokens diluted with function words; with probability
/// temporal_offset_prob a transcript is replaced by a neighbor clip's.
inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;

    std::set<std::string> token_set(detail::function_words().begin(),
                                    detail::function_words().end());
    for (std::size_t c = 0; c < spec.concepts; ++c) token_set.insert(detail::concept_token(c));
    corpus.vocab = Vocabulary::build(token_set);

    const auto anchors = detail::concept_anchors(spec);
    ModelConfig id_cfg; // only the special ids are used here
    const std::size_t total_videos = spec.num_videos + spec.val_videos;

    for (std::size_t v = 0; v < total_videos; ++v) {
        char vid[24];
        std::snprintf(vid, sizeof(vid), "vid%04zu", v);
        RngStream rng = RngStream::derive(spec.seed, "video", v);

        std::vector<ClipTextPair> clips(spec.clips_per_video);
        std::vector<std::string> own_text(spec.clips_per_video);
        for (std::size_t k = 0; k < spec.clips_per_video; ++k) {
            ClipTextPair& pair = clips[k];
            pair.video_id = vid;
            pair.clip_index = k;

            const std::size_t m =
                spec.frames_min + rng.uniform_index(spec.frames_max - spec.frames_min + 1);
            const std::size_t max_steps = std::min<std::size_t>(4, m);
            const std::size_t n_steps = 1 + rng.uniform_index(max_steps);

            // contiguous frame segments, each at least one frame
            std::vector<std::size_t> cuts{0, m};
            while (cuts.size() < n_steps + 1) {
                const std::size_t cut = 1 + rng.uniform_index(m - 1);
                if (std::find(cuts.begin(), cuts.end(), cut) == cuts.end()) cuts.push_back(cut);
            }
            std::sort(cuts.begin(), cuts.end());

            std::vector<int> step_concepts;
            pair.frames = Tensor::zeros({m, spec.feature_dim});
            pair.video_real.assign(m, 1);
            pair.frame_labels.assign(m, 0);
            for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
                const int concept_id = static_cast<int>(rng.uniform_index(spec.concepts));
                step_concepts.push_back(concept_id);
                ClipTextPair::StepSpan span;
                span.concept_id = concept_id;
                span.begin = cuts[s];
                span.end = cuts[s + 1];
                span.description = detail::concept_token(static_cast<std::size_t>(concept_id));
                pair.steps.push_back(span);
                for (std::size_t f = cuts[s]; f < cuts[s + 1]; ++f) {
                    pair.frame_labels[f] = concept_id;
                    for (std::size_t col = 0; col < spec.feature_dim; ++col)
                        pair.frames.at(f, col) =
                            anchors[static_cast<std::size_t>(concept_id)][col] +
                            rng.gaussian(0.0, spec.noise_sigma);
                }
            }

            // caption: the clean step description
            std::vector<std::string> caption_words;
            for (int c : step_concepts)
                caption_words.push_back(detail::concept_token(static_cast<std::size_t>(c)));
            for (std::size_t i = 0; i < caption_words.size(); ++i)
                pair.caption += (i ? " " : "") + caption_words[i];

            // transcript: step tokens diluted with function words up to target length
            const std::size_t want =
                std::max(spec.tokens_min + rng.uniform_index(spec.tokens_max - spec.tokens_min + 1),
                         caption_words.size());
            std::vector<std::string> words = caption_words;
            while (words.size() < want) {
                const std::size_t pos = rng.uniform_index(words.size() + 1);
                const auto& fw = detail::function_words();
                words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos),
                             fw[rng.uniform_index(fw.size())]);
            }
            for (std::size_t i = 0; i < words.size(); ++i) own_text[k] += (i ? " " : "") + words[i];

            pair.sentiment = detail::sentiment_rule(step_concepts, spec.concepts, rng);
        }

        // Directed misalignment: a flagged clip's transcript is replaced by a
        // neighbor's (next clip if any, else previous), narrator-out-of-sync.
        for (std::size_t k = 0; k < spec.clips_per_video; ++k) {
            std::string text = own_text[k];
            if (spec.clips_per_video > 1 && rng.bernoulli(spec.temporal_offset_prob)) {
                const std::size_t src = (k + 1 < spec.clips_per_video) ? k + 1 : k - 1;
                text = own_text[src];
            }
            clips[k].text = text;
            std::vector<int> body = tokenize(text, corpus.vocab);
            clips[k].tokens.clear();
            clips[k].tokens.push_back(id_cfg.cls_id);
            clips[k].tokens.insert(clips[k].tokens.end(), body.begin(), body.end());
            clips[k].tokens.push_back(id_cfg.sep_id);
            clips[k].text_real.assign(clips[k].tokens.size(), 1);
        }

        auto& dst = (v < spec.num_videos) ? corpus.train : corpus.val;
        for (auto& c : clips) dst.push_back(std::move(c));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// on-disk formats
// ---------------------------------------------------------------------------

inline constexpr char kFeatureMagic[4] = {'U', 'V', 'L', 'F'};
inline constexpr std::uint16_t kFeatureVersion = 1;

/// Per-video feature container: magic, version, clip count, then per clip
/// (clip_index u32, m u32, d_f u32, row-major f64 LE), trailing CRC32.
inline std::string encode_feature_file(const std::vector<const ClipTextPair*>& clips) {
    std::string out;
    out.append(kFeatureMagic, 4);
    put_u16(out, kFeatureVersion);
    put_u32(out, static_cast<std::uint32_t>(clips.size()));
    for (const ClipTextPair* p : clips) {
        put_u32(out, static_cast<std::uint32_t>(p->clip_index));
        put_u32(out, static_cast<std::uint32_t>(p->frames.shape[0]));
        put_u32(out, static_cast<std::uint32_t>(p->frames.shape[1]));
        for (double v : *p->frames.data) put_f64(out, v);
    }
    put_u32(out, crc32(out));
    return out;
}

struct FeatureClip {
    std::uint32_t clip_index = 0;
    Tensor frames;
};

inline std::vector<FeatureClip> decode_feature_file(const std::string& bytes,
                                                    const std::string& origin) {
    if (bytes.size() < 4 || bytes.compare(0, 4, kFeatureMagic, 4) != 0)
        throw IoError("'" + origin + "' is not a feature file (bad magic)");
    if (bytes.size() < 14) throw IoError("'" + origin + "': truncated feature file");
    const std::uint32_t stored = crc32(bytes.data(), bytes.size() - 4);
    ByteReader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32("crc") != stored)
        throw IoError("'" + origin + "': checksum mismatch, file is corrupt");
    ByteReader r(bytes.substr(4, bytes.size() - 8));
    const std::uint16_t version = r.u16("version");
    if (version != kFeatureVersion)
        throw IoError("'" + origin + "': unsupported feature file version " +
                      std::to_string(version));
    const std::uint32_t count = r.u32("clip count");
    std::vector<FeatureClip> clips(count);
    for (auto& clip : clips) {
        clip.clip_index = r.u32("clip index");
        const std::uint32_t m = r.u32("frame count");
        const std::uint32_t df = r.u32("feature dim");
        clip.frames = Tensor::zeros({m, df});
        for (double& v : *clip.frames.data) v = r.f64("frame value");
    }
    if (r.remaining() != 0)
        throw IoError("'" + origin + "': " + std::to_string(r.remaining()) +
                      " unexpected trailing bytes");
    return clips;
}

inline nlohmann::ordered_json pair_to_json(const ClipTextPair& p, const std::string& split) {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const auto& s : p.steps)
        steps.push_back(nlohmann::ordered_json{{"concept", s.concept_id},
                                               {"begin", s.begin},
                                               {"end", s.end},
                                               {"description", s.description}});
    return nlohmann::ordered_json{{"video_id", p.video_id}, {"clip_index", p.clip_index},
                                  {"text", p.text},         {"caption", p.caption},
                                  {"frame_labels", p.frame_labels},
                                  {"steps", steps},         {"sentiment", p.sentiment},
                                  {"split", split}};
}

/// Writes corpus_meta.json, vocab.txt, transcripts.jsonl, features/*.uvlf.
inline void write_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "features", ec);
    if (ec) throw IoError("cannot create corpus directory '" + dir + "': " + ec.message());

    std::string vocab_txt;
    for (const auto& t : corpus.vocab.id_to_token) vocab_txt += t + "\n";
    write_file_bytes((fs::path(dir) / "vocab.txt").string(), vocab_txt);

    std::string jsonl;
    auto add_split = [&](const std::vector<ClipTextPair>& pairs, const char* name) {
        for (const auto& p : pairs) jsonl += pair_to_json(p, name).dump() + "\n";
    };
    add_split(corpus.train, "train");
    add_split(corpus.val, "val");
    write_file_bytes((fs::path(dir) / "transcripts.jsonl").string(), jsonl);

    std::map<std::string, std::vector<const ClipTextPair*>> by_video;
    for (const auto& p : corpus.train) by_video[p.video_id].push_back(&p);
    for (const auto& p : corpus.val) by_video[p.video_id].push_back(&p);
    for (auto& [vid, clips] : by_video) {
        std::sort(clips.begin(), clips.end(),
                  [](const ClipTextPair* a, const ClipTextPair* b) {
                      return a->clip_index < b->clip_index;
                  });
        write_file_bytes((fs::path(dir) / "features" / (vid + ".uvlf")).string(),
                         encode_feature_file(clips));
    }

    nlohmann::ordered_json meta{{"format", "univl-corpus"},
                                {"spec", corpus_spec_to_json(corpus.spec)},
                                {"train_pairs", corpus.train.size()},
                                {"val_pairs", corpus.val.size()},
                                {"vocab_size", corpus.vocab.size()}};
    write_file_bytes((fs::path(dir) / "corpus_meta.json").string(), meta.dump(2) + "\n");
}

inline Corpus load_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file_bytes((fs::path(dir) / "corpus_meta.json").string()));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + dir + "/corpus_meta.json': invalid JSON: " + e.what());
    }
    Corpus corpus;
    corpus.spec = corpus_spec_from_json(meta.at("spec"));

    std::vector<std::string> vocab_lines;
    {
        std::istringstream in(read_file_bytes((fs::path(dir) / "vocab.txt").string()));
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) vocab_lines.push_back(line);
    }
    corpus.vocab = Vocabulary::from_lines(vocab_lines);

    std::map<std::string, std::map<std::uint32_t, Tensor>> features;
    for (const auto& entry : fs::directory_iterator(fs::path(dir) / "features")) {
        if (entry.path().extension() != ".uvlf") continue;
        const std::string vid = entry.path().stem().string();
        for (auto& clip : decode_feature_file(read_file_bytes(entry.path().string()),
                                              entry.path().string()))
            features[vid][clip.clip_index] = clip.frames;
    }

    ModelConfig id_cfg;
    std::istringstream in(read_file_bytes((fs::path(dir) / "transcripts.jsonl").string()));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(dir + "/transcripts.jsonl:" + std::to_string(line_no) +
                          ": invalid JSON record: " + e.what());
        }
        ClipTextPair p;
        p.video_id = j.at("video_id").get<std::string>();
        p.clip_index = j.at("clip_index").get<std::size_t>();
        p.text = j.at("text").get<std::string>();
        p.caption = j.at("caption").get<std::string>();
        p.frame_labels = j.at("frame_labels").get<std::vector<int>>();
        for (const auto& sj : j.at("steps")) {
            ClipTextPair::StepSpan s;
            s.concept_id = sj.at("concept").get<int>();
            s.begin = sj.at("begin").get<std::size_t>();
            s.end = sj.at("end").get<std::size_t>();
            s.description = sj.at("description").get<std::string>();
            p.steps.push_back(s);
        }
        p.sentiment = j.at("sentiment").get<double>();

        auto vit = features.find(p.video_id);
        if (vit == features.end() || !vit->second.count(static_cast<std::uint32_t>(p.clip_index)))
            throw IoError(dir + "/transcripts.jsonl:" + std::to_string(line_no) +
                          ": no features for " + p.video_id + "#" + std::to_string(p.clip_index));
        p.frames = vit->second.at(static_cast<std::uint32_t>(p.clip_index));
        p.video_real.assign(p.frames.shape[0], 1);

        std::vector<int> body = tokenize(p.text, corpus.vocab);
        p.tokens.push_back(id_cfg.cls_id);
        p.tokens.insert(p.tokens.end(), body.begin(), body.end());
        p.tokens.push_back(id_cfg.sep_id);
        p.text_real.assign(p.tokens.size(), 1);

        const std::string split = j.at("split").get<std::string>();
        if (split == "train")
            corpus.train.push_back(std::move(p));
        else if (split == "val")
            corpus.val.push_back(std::move(p));
        else
            throw IoError(dir + "/transcripts.jsonl:" + std::to_string(line_no) +
                          ": unknown split '" + split + "'");
    }
    return corpus;
}

} // namespace uvl

#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "uvl/checkpoint.hpp"
#include "uvl/corpus.hpp"
#include "uvl/downstream.hpp"
#include "uvl/schedule.hpp"

namespace uvl {

// Exit-code contract, fixed for scripting.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    // bad flags, bad config, bad task name
inline constexpr int kExitNumeric = 3;  // training aborted on a non-finite loss
inline constexpr int kExitIo = 4;       // unreadable/corrupt/unwritable files

// ---------------------------------------------------------------------------
// key = value config files
//
// One assignment per line, '#' starts a comment, blank lines are skipped.
// Every diagnostic carries file:line so a bad config is a one-hop fix.
// ---------------------------------------------------------------------------

struct KvEntry {
    std::string key, value;
    std::size_t line = 0;
};

namespace detail {
inline std::string trimmed(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}
} // namespace detail

inline std::vector<KvEntry> parse_kv_text(const std::string& text, const std::string& origin) {
    std::vector<KvEntry> out;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string raw;
    std::size_t no = 0;
    while (std::getline(in, raw)) {
        ++no;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = detail::trimmed(raw);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(no) +
                              ": expected 'key = value', got '" + line + "'");
        KvEntry e;
        e.key = detail::trimmed(line.substr(0, eq));
        e.value = detail::trimmed(line.substr(eq + 1));
        e.line = no;
        if (e.key.empty())
            throw ConfigError(origin + ":" + std::to_string(no) + ": assignment without a key");
        if (e.value.empty())
            throw ConfigError(origin + ":" + std::to_string(no) + ": no value for key '" +
                              e.key + "'");
        if (!seen.insert(e.key).second)
            throw ConfigError(origin + ":" + std::to_string(no) + ": duplicate key '" + e.key +
                              "'");
        out.push_back(std::move(e));
    }
    return out;
}

inline std::string kv_where(const std::string& origin, const KvEntry& e) {
    return origin + ":" + std::to_string(e.line) + ": ";
}

inline std::uint64_t kv_u64(const KvEntry& e, const std::string& origin) {
    std::uint64_t v = 0;
    const char* first = e.value.data();
    const char* last = first + e.value.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last)
        throw ConfigError(kv_where(origin, e) + "value for '" + e.key +
                          "' must be a non-negative integer, got '" + e.value + "'");
    return v;
}

inline std::size_t kv_size(const KvEntry& e, const std::string& origin) {
    return static_cast<std::size_t>(kv_u64(e, origin));
}

inline double kv_double(const KvEntry& e, const std::string& origin) {
    char* end = nullptr;
    const double v = std::strtod(e.value.c_str(), &end);
    if (end == e.value.c_str() || *end != '\0')
        throw ConfigError(kv_where(origin, e) + "value for '" + e.key +
                          "' must be a number, got '" + e.value + "'");
    return v;
}

// ---------------------------------------------------------------------------
// corpus spec files
// ---------------------------------------------------------------------------

inline CorpusSpec corpus_spec_from_file(const std::string& path) {
    const std::vector<KvEntry> entries = parse_kv_text(read_file_bytes(path), path);
    CorpusSpec s;
    std::map<std::string, std::size_t> set_at;  // key -> line, for cross-field pinpointing

    for (const KvEntry& e : entries) {
        set_at[e.key] = e.line;
        const std::string where = kv_where(path, e);
        if (e.key == "num_videos") s.num_videos = kv_size(e, path);
        else if (e.key == "val_videos") s.val_videos = kv_size(e, path);
        else if (e.key == "clips_per_video") s.clips_per_video = kv_size(e, path);
        else if (e.key == "tokens_min") s.tokens_min = kv_size(e, path);
        else if (e.key == "tokens_max") s.tokens_max = kv_size(e, path);
        else if (e.key == "frames_min") s.frames_min = kv_size(e, path);
        else if (e.key == "frames_max") s.frames_max = kv_size(e, path);
        else if (e.key == "concepts") s.concepts = kv_size(e, path);
        else if (e.key == "feature_dim") s.feature_dim = kv_size(e, path);
        else if (e.key == "seed") s.seed = kv_u64(e, path);
        else if (e.key == "noise_sigma") {
            s.noise_sigma = kv_double(e, path);
            if (s.noise_sigma < 0)
                throw ConfigError(where + "noise_sigma must be >= 0, got " + e.value);
        } else if (e.key == "temporal_offset_prob") {
            s.temporal_offset_prob = kv_double(e, path);
            if (s.temporal_offset_prob < 0 || s.temporal_offset_prob > 1)
                throw ConfigError(where + "temporal_offset_prob must be in [0, 1], got " +
                                  e.value);
        } else {
            throw ConfigError(where + "unknown corpus spec key '" + e.key +
                              "' (known keys: num_videos, val_videos, clips_per_video, "
                              "tokens_min, tokens_max, frames_min, frames_max, concepts, "
                              "feature_dim, noise_sigma, temporal_offset_prob, seed)");
        }
    }

    // Cross-field failures point at the participating line that appears last.
    auto pin = [&](const char* a, const char* b) {
        std::size_t line = 0;
        if (set_at.count(a)) line = set_at[a];
        if (set_at.count(b)) line = std::max(line, set_at[b]);
        return line ? path + ":" + std::to_string(line) + ": " : path + ": ";
    };
    if (s.tokens_min > s.tokens_max)
        throw ConfigError(pin("tokens_min", "tokens_max") + "token range [" +
                          std::to_string(s.tokens_min) + ", " + std::to_string(s.tokens_max) +
                          "] is empty");
    if (s.frames_min > s.frames_max)
        throw ConfigError(pin("frames_min", "frames_max") + "frame range [" +
                          std::to_string(s.frames_min) + ", " + std::to_string(s.frames_max) +
                          "] is empty");
    try {
        s.validate();
    } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
    }
    return s;
}

// ---------------------------------------------------------------------------
// pre-training config files (architecture + schedule + objectives, flat keys)
// ---------------------------------------------------------------------------

struct PretrainFile {
    ModelConfig model;
    TrainConfig train;
    std::vector<std::string> model_keys;  // architecture keys set in the file
};

inline PretrainFile pretrain_config_from_file(const std::string& path) {
    const std::vector<KvEntry> entries = parse_kv_text(read_file_bytes(path), path);
    PretrainFile f;
    std::map<std::string, std::size_t> set_at;

    for (const KvEntry& e : entries) {
        set_at[e.key] = e.line;
        const std::string where = kv_where(path, e);
        bool model_key = true;
        if (e.key == "vocab_size") f.model.vocab_size = kv_size(e, path);
        else if (e.key == "d") f.model.d = kv_size(e, path);
        else if (e.key == "d_f") f.model.d_f = kv_size(e, path);
        else if (e.key == "n_max") f.model.n_max = kv_size(e, path);
        else if (e.key == "m_max") f.model.m_max = kv_size(e, path);
        else if (e.key == "text_layers") f.model.text_layers = kv_size(e, path);
        else if (e.key == "video_layers") f.model.video_layers = kv_size(e, path);
        else if (e.key == "cross_layers") f.model.cross_layers = kv_size(e, path);
        else if (e.key == "decoder_layers") f.model.decoder_layers = kv_size(e, path);
        else if (e.key == "heads") f.model.heads = kv_size(e, path);
        else if (e.key == "ffn_dim") f.model.ffn_dim = kv_size(e, path);
        else if (e.key == "frame_classes") f.model.frame_classes = kv_size(e, path);
        else if (e.key == "dropout") {
            f.model.dropout = kv_double(e, path);
            if (f.model.dropout < 0 || f.model.dropout >= 1)
                throw ConfigError(where + "dropout must be in [0, 1), got " + e.value);
        } else if (e.key == "gelu") {
            if (e.value == "exact") f.model.gelu_kind = GeluKind::Exact;
            else if (e.value == "tanh") f.model.gelu_kind = GeluKind::Tanh;
            else
                throw ConfigError(where + "gelu must be 'exact' or 'tanh', got '" + e.value +
                                  "'");
        } else {
            model_key = false;
            if (e.key == "stage1_epochs") f.train.stage1_epochs = kv_size(e, path);
            else if (e.key == "stage2_epochs") f.train.stage2_epochs = kv_size(e, path);
            else if (e.key == "batch_size") f.train.batch_size = kv_size(e, path);
            else if (e.key == "checkpoint_every") f.train.checkpoint_every = kv_size(e, path);
            else if (e.key == "seed") f.train.seed = kv_u64(e, path);
            else if (e.key == "cmfm_pool_cap") f.train.objectives.cmfm_pool_cap = kv_size(e, path);
            else if (e.key == "align_batch_negatives")
                f.train.objectives.align_batch_negatives = kv_size(e, path);
            else if (e.key == "stage1_lr" || e.key == "stage2_lr") {
                const double lr = kv_double(e, path);
                if (lr <= 0) throw ConfigError(where + e.key + " must be positive, got " + e.value);
                (e.key == "stage1_lr" ? f.train.stage1_lr : f.train.stage2_lr) = lr;
            } else if (e.key == "warmup_fraction") {
                f.train.warmup_fraction = kv_double(e, path);
                if (f.train.warmup_fraction < 0 || f.train.warmup_fraction > 0.5)
                    throw ConfigError(where + "warmup_fraction must be in [0, 0.5], got " +
                                      e.value);
            } else if (e.key == "grad_clip") {
                f.train.grad_clip = kv_double(e, path);
                if (f.train.grad_clip < 0)
                    throw ConfigError(where + "grad_clip must be >= 0, got " + e.value);
            } else if (e.key == "mask_rate") {
                f.train.objectives.mask_rate = kv_double(e, path);
                if (f.train.objectives.mask_rate < 0 || f.train.objectives.mask_rate >= 1)
                    throw ConfigError(where + "mask_rate must be in [0, 1), got " + e.value);
            } else if (e.key == "enhancedv_prob") {
                f.train.objectives.enhancedv_prob = kv_double(e, path);
                if (f.train.objectives.enhancedv_prob < 0 ||
                    f.train.objectives.enhancedv_prob > 1)
                    throw ConfigError(where + "enhancedv_prob must be in [0, 1], got " + e.value);
            } else if (e.key == "joint_weight" || e.key == "cmlm_weight" ||
                       e.key == "cmfm_weight" || e.key == "align_weight" ||
                       e.key == "decoder_weight") {
                const double w = kv_double(e, path);
                if (w < 0) throw ConfigError(where + e.key + " must be >= 0, got " + e.value);
                LossWeights& lw = f.train.objectives.weights;
                if (e.key == "joint_weight") lw.joint = w;
                else if (e.key == "cmlm_weight") lw.cmlm = w;
                else if (e.key == "cmfm_weight") lw.cmfm = w;
                else if (e.key == "align_weight") lw.align = w;
                else lw.decoder = w;
            } else {
                throw ConfigError(where + "unknown pre-training config key '" + e.key + "'");
            }
        }
        if (model_key) f.model_keys.push_back(e.key);
    }

    if (!(f.train.stage2_lr < f.train.stage1_lr)) {
        std::size_t line = 0;
        if (set_at.count("stage1_lr")) line = set_at["stage1_lr"];
        if (set_at.count("stage2_lr")) line = std::max(line, set_at["stage2_lr"]);
        throw ConfigError((line ? path + ":" + std::to_string(line) : path) +
                          ": stage2_lr must be below stage1_lr (the second stage continues at "
                          "a decreased rate)");
    }
    try {
        f.model.validate();
        f.train.validate();
    } catch (const ConfigError& err) {
        throw ConfigError(path + ": " + err.what());
    }
    return f;
}

/// The corpus must fit inside the model's caps before any encoder sees it.
inline void check_corpus_fits_model(const Corpus& corpus, const ModelConfig& cfg) {
    try {
        corpus.spec.validate(cfg.n_max, cfg.m_max, cfg.vocab_size);
    } catch (const ConfigError& err) {
        throw ConfigError(std::string("corpus does not fit the model: ") + err.what());
    }
    if (corpus.spec.feature_dim != cfg.d_f)
        throw ConfigError("corpus feature_dim " + std::to_string(corpus.spec.feature_dim) +
                          " does not match the model's d_f " + std::to_string(cfg.d_f));
    if (corpus.vocab.size() > cfg.vocab_size)
        throw ConfigError("corpus vocabulary of " + std::to_string(corpus.vocab.size()) +
                          " tokens exceeds the model's vocab_size " +
                          std::to_string(cfg.vocab_size));
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

inline std::string file_hash_hex(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    return hash_hex(fnv1a64_bytes(bytes.data(), bytes.size()));
}

/// Relative path -> content hash for every regular file under `dir`, skipping
/// names in `exclude`. Keys are relative so two runs into different
/// directories stay comparable.
inline std::map<std::string, std::string> dir_file_hashes(
    const std::string& dir, const std::set<std::string>& exclude = {}) {
    namespace fs = std::filesystem;
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), dir).generic_string();
        if (exclude.count(rel)) continue;
        out[rel] = file_hash_hex(entry.path().string());
    }
    return out;
}

inline std::string combined_hash(const std::map<std::string, std::string>& hashes) {
    std::string buf;
    for (const auto& [path, hex] : hashes) {
        buf += path;
        buf.push_back('\0');
        buf += hex;
        buf.push_back('\n');
    }
    return hash_hex(fnv1a64_bytes(buf.data(), buf.size()));
}

inline std::string git_describe() {
    FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
    if (pipe == nullptr) return "unknown";
    std::string out;
    char buf[256];
    while (std::fgets(buf, sizeof(buf), pipe) != nullptr) out += buf;
    ::pclose(pipe);
    const std::string t = detail::trimmed(out);
    return t.empty() ? "unknown" : t;
}

/// One per run. Wall time and the git state vary between runs by nature, so
/// the byte-identical replay contract covers checkpoints, ledgers, and
/// reports — not manifests; their input/output hashes are the comparable part.
struct RunManifest {
    std::string command;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::uint64_t seed = 0;
    std::string git = "unknown";
    std::map<std::string, std::string> input_hashes, output_hashes;
    double wall_seconds = 0.0;

    nlohmann::ordered_json to_json() const {
        return nlohmann::ordered_json{
            {"command", command},           {"config", config},
            {"seed", seed},                 {"git_describe", git},
            {"input_hashes", input_hashes}, {"output_hashes", output_hashes},
            {"wall_seconds", wall_seconds}};
    }
};

inline void write_manifest(const std::string& path, const RunManifest& m) {
    write_file_bytes(path, m.to_json().dump(2) + "\n");
}

class WallClock {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

struct GenCorpusArgs {
    std::string spec_file, out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

inline int cmd_gen_corpus(const GenCorpusArgs& a, const std::string& command) {
    WallClock clock;
    CorpusSpec spec = corpus_spec_from_file(a.spec_file);
    if (a.seed_set) spec.seed = a.seed;
    const Corpus corpus = generate_corpus(spec);
    write_corpus(corpus, a.out_dir);

    RunManifest m;
    m.command = command;
    m.config = corpus_spec_to_json(spec);
    m.seed = spec.seed;
    m.git = git_describe();
    m.input_hashes["spec"] = file_hash_hex(a.spec_file);
    m.output_hashes = dir_file_hashes(a.out_dir, {"manifest.json"});
    m.wall_seconds = clock.seconds();
    write_manifest((std::filesystem::path(a.out_dir) / "manifest.json").string(), m);

    std::cout << "wrote " << corpus.train.size() << " train + " << corpus.val.size()
              << " val pairs (vocabulary of " << corpus.vocab.size() << ") to " << a.out_dir
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string config_file, corpus_dir, out_ckpt, init_ckpt, ledger_path, manifest_path;
    std::string stage = "all";
    std::uint64_t seed = 0;
    bool seed_set = false, stage_set = false;
    bool no_joint = false, no_align = false, no_cmfm = false, no_cmlm = false,
         no_decoder = false, no_enhancedv = false, no_stagedp = false;
};

inline int cmd_pretrain(PretrainArgs a, const std::string& command) {
    WallClock clock;
    PretrainFile file = pretrain_config_from_file(a.config_file);
    if (a.seed_set) file.train.seed = a.seed;

    PretrainConfig& obj = file.train.objectives;
    if (a.no_joint) obj.use_joint = false;
    if (a.no_align) obj.use_align = false;
    if (a.no_cmfm) obj.use_cmfm = false;
    if (a.no_cmlm) obj.use_cmlm = false;
    if (a.no_decoder) obj.use_decoder = false;
    if (a.no_enhancedv) obj.enhancedv_prob = 0.0;
    if (a.no_stagedp) {
        if (a.stage_set && a.stage != "2")
            throw ConfigError("--no-stagedp trains stage 2 only, from scratch; it conflicts "
                              "with --stage " + a.stage);
        a.stage = "2";
    }

    ModelConfig mcfg = file.model;
    LoadedCheckpoint init;
    bool have_init = false;
    if (!a.init_ckpt.empty()) {
        init = load_checkpoint(a.init_ckpt);
        // The architecture is the checkpoint's. A config may restate it (the
        // staged workflow reuses one file), but never contradict it.
        if (!file.model_keys.empty() &&
            config_to_json(file.model) != config_to_json(init.meta.config))
            throw ConfigError("with --init the architecture comes from the checkpoint; the "
                              "architecture keys in " + a.config_file +
                              " disagree with " + a.init_ckpt);
        mcfg = init.meta.config;
        have_init = true;
    }

    const Corpus corpus = load_corpus(a.corpus_dir);
    check_corpus_fits_model(corpus, mcfg);

    UniVLModel model = UniVLModel::init(mcfg, file.train.seed);
    if (have_init) adopt_params(model, init.params);

    const std::string ledger_path =
        a.ledger_path.empty() ? a.out_ckpt + ".ledger.jsonl" : a.ledger_path;
    const std::string manifest_path =
        a.manifest_path.empty() ? a.out_ckpt + ".manifest.json" : a.manifest_path;

    std::string ledger;
    StageHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& rec) { ledger += rec.to_json().dump() + "\n"; };
    hooks.on_checkpoint = [&](const CheckpointMeta& meta, const UniVLModel& m,
                              const AdamState& adam) {
        save_checkpoint(a.out_ckpt, meta, m.params.named());
        save_adam(a.out_ckpt + ".opt", adam);
    };

    Trainer trainer(model, corpus, file.train, hooks);

    // Mid-stage resume: an --init checkpoint from inside the requested stage
    // continues from its epoch, which needs the optimizer sidecar to replay
    // the uninterrupted trajectory bit-for-bit.
    auto resume_epoch = [&](int stage) -> std::pair<AdamState, std::size_t> {
        if (!have_init || init.meta.stage != stage || init.meta.epoch == 0) return {AdamState{}, 0};
        const std::string sidecar = a.init_ckpt + ".opt";
        if (!std::filesystem::exists(sidecar))
            throw IoError("resuming stage " + std::to_string(stage) + " from epoch " +
                          std::to_string(init.meta.epoch) + " needs the optimizer sidecar '" +
                          sidecar + "', which is missing");
        return {load_adam(sidecar), init.meta.epoch};
    };

    std::vector<StageResult> results;
    int last_stage = 0;
    std::size_t last_epochs = 0;
    if (a.stage == "all" || a.stage == "1") {
        auto [adam, start] = resume_epoch(1);
        results.push_back(trainer.run_stage1(adam, start));
        last_stage = 1;
        last_epochs = results.back().epochs_done;
    }
    if ((a.stage == "all" && !results.back().diverged) || a.stage == "2") {
        auto [adam, start] = resume_epoch(2);
        results.push_back(trainer.run_stage2(adam, start));
        last_stage = 2;
        last_epochs = results.back().epochs_done;
    }

    write_file_bytes(ledger_path, ledger);
    // A resumed stage with nothing left to do never fires the checkpoint
    // hook; persist the (unchanged) state so --out exists either way.
    if (!std::filesystem::exists(a.out_ckpt)) {
        CheckpointMeta meta;
        meta.config = mcfg;
        meta.seed = file.train.seed;
        meta.stage = last_stage;
        meta.epoch = last_epochs;
        meta.global_step = last_epochs * trainer.batches_per_epoch();
        save_checkpoint(a.out_ckpt, meta, model.params.named());
    }

    RunManifest m;
    m.command = command;
    m.config = nlohmann::ordered_json{
        {"model", config_to_json(mcfg)},
        {"train",
         nlohmann::ordered_json{{"stage1_epochs", file.train.stage1_epochs},
                                {"stage2_epochs", file.train.stage2_epochs},
                                {"stage1_lr", file.train.stage1_lr},
                                {"stage2_lr", file.train.stage2_lr},
                                {"batch_size", file.train.batch_size},
                                {"warmup_fraction", file.train.warmup_fraction},
                                {"seed", file.train.seed},
                                {"checkpoint_every", file.train.checkpoint_every},
                                {"grad_clip", file.train.grad_clip}}},
        {"objectives",
         nlohmann::ordered_json{{"use_joint", obj.use_joint},
                                {"use_cmlm", obj.use_cmlm},
                                {"use_cmfm", obj.use_cmfm},
                                {"use_align", obj.use_align},
                                {"use_decoder", obj.use_decoder},
                                {"mask_rate", obj.mask_rate},
                                {"enhancedv_prob", obj.enhancedv_prob},
                                {"cmfm_pool_cap", obj.cmfm_pool_cap},
                                {"align_batch_negatives", obj.align_batch_negatives},
                                {"weights",
                                 nlohmann::ordered_json{{"joint", obj.weights.joint},
                                                        {"cmlm", obj.weights.cmlm},
                                                        {"cmfm", obj.weights.cmfm},
                                                        {"align", obj.weights.align},
                                                        {"decoder", obj.weights.decoder}}}}},
        {"stage", a.stage}};
    m.seed = file.train.seed;
    m.git = git_describe();
    m.input_hashes["config"] = file_hash_hex(a.config_file);
    m.input_hashes["corpus"] = combined_hash(dir_file_hashes(a.corpus_dir, {"manifest.json"}));
    if (have_init) m.input_hashes["init"] = file_hash_hex(a.init_ckpt);
    m.output_hashes["checkpoint"] = file_hash_hex(a.out_ckpt);
    if (std::filesystem::exists(a.out_ckpt + ".opt"))
        m.output_hashes["optimizer"] = file_hash_hex(a.out_ckpt + ".opt");
    m.output_hashes["ledger"] = file_hash_hex(ledger_path);
    m.wall_seconds = clock.seconds();
    write_manifest(manifest_path, m);

    for (const StageResult& res : results) {
        for (const std::string& n : res.notices) std::cerr << "univl: note: " << n << "\n";
        if (res.diverged) {
            std::cerr << "univl: training aborted: " << res.abort_reason << "\n";
            return kExitNumeric;
        }
        if (!res.records.empty()) {
            const EpochRecord& last = res.records.back();
            std::cout << "stage " << last.stage << ": " << res.epochs_done
                      << " epochs, final total loss " << last.total << "\n";
        }
    }
    std::cout << "checkpoint " << a.out_ckpt << " (" << hash_hex(params_hash(model.params.named()))
              << ")\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// finetune / eval
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& task_names() {
    static const std::vector<std::string> names{"retrieval-joint", "retrieval-align", "caption",
                                                "segmentation",    "localization",    "sentiment"};
    return names;
}

inline void check_task_name(const std::string& task) {
    for (const std::string& t : task_names())
        if (t == task) return;
    std::string all;
    for (const std::string& t : task_names()) all += (all.empty() ? "" : ", ") + t;
    throw ConfigError("unknown task '" + task + "'; valid tasks: " + all);
}

struct TaskArgs {
    std::string task, corpus_dir, ckpt, out_ckpt, report_path, manifest_path;
    std::string split = "auto";
    std::size_t epochs = 30, batch_size = 16, beam_size = 5;
    double lr = 1e-4, warmup_fraction = 0.1, grad_clip = 1.0;
    std::uint64_t seed = 1;
};

inline FinetuneConfig finetune_config_of(const TaskArgs& a) {
    FinetuneConfig cfg;
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.warmup_fraction = a.warmup_fraction;
    cfg.seed = a.seed;
    cfg.grad_clip = a.grad_clip;
    cfg.validate();
    return cfg;
}

inline MetricRecord metric_record(const std::string& task, const std::string& metric,
                                  double value, const std::string& ckpt_hash,
                                  std::uint64_t corpus_seed) {
    MetricRecord r;
    r.task = task;
    r.metric = metric;
    r.value = value;
    r.checkpoint_hash = ckpt_hash;
    r.corpus_seed = corpus_seed;
    return r;
}

inline void append_retrieval_records(std::vector<MetricRecord>& out, const std::string& task,
                                     const RetrievalResult& r, const std::string& h,
                                     std::uint64_t cs) {
    out.push_back(metric_record(task, "r1", r.r1, h, cs));
    out.push_back(metric_record(task, "r5", r.r5, h, cs));
    out.push_back(metric_record(task, "r10", r.r10, h, cs));
    out.push_back(metric_record(task, "median_r", r.median_r, h, cs));
}

inline void append_sentiment_records(std::vector<MetricRecord>& out, const SentimentMetrics& sm,
                                     const std::string& h, std::uint64_t cs) {
    out.push_back(metric_record("sentiment", "mae", sm.mae, h, cs));
    out.push_back(metric_record(
        "sentiment", "corr",
        sm.corr_defined ? sm.corr : std::numeric_limits<double>::quiet_NaN(), h, cs));
    out.push_back(metric_record("sentiment", "ba", sm.ba, h, cs));
    out.push_back(metric_record("sentiment", "f1", sm.f1, h, cs));
}

/// Beam-decode captions for a split and score them — the shared evaluation
/// half of the caption task, with or without a preceding fine-tune.
inline CaptionEval caption_eval_only(const UniVLModel& model, const Corpus& corpus,
                                     std::size_t beam_size, const std::string& split) {
    CaptionEval out;
    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, split, out.eval_split);
    if (pairs.empty()) throw DataError("caption eval: split '" + out.eval_split + "' is empty");
    NoGradGuard ng;
    const FwdCtx ctx{};
    const std::size_t max_len = model.cfg.n_max - 1;
    std::vector<TokenSeq> cands, refs;
    for (const ClipTextPair& p : pairs) {
        const EncodingBundle enc =
            model.encode_pair(p.tokens, p.text_real, p.frames, p.video_real, ctx);
        BoolVec mem_real = p.text_real;
        mem_real.insert(mem_real.end(), p.video_real.begin(), p.video_real.end());
        cands.push_back(beam_search(model, enc.cross, mem_real, beam_size, max_len));
        refs.push_back(tokenize(p.caption, corpus.vocab));
    }
    out.bleu3 = bleu(cands, refs, 3);
    out.bleu4 = bleu(cands, refs, 4);
    out.rouge_l = rouge_l(cands, refs);
    out.evaluated = pairs.size();
    return out;
}

inline SegmentationEval segmentation_eval_only(const UniVLModel& model, const Corpus& corpus,
                                               const std::string& split) {
    SegmentationEval out;
    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, split, out.eval_split);
    if (pairs.empty())
        throw DataError("segmentation eval: split '" + out.eval_split + "' is empty");
    std::size_t correct = 0, total = 0;
    for (const ClipTextPair& p : pairs) {
        const std::vector<int> pred = segmentation_predict(model, p);
        for (std::size_t r = 0; r < pred.size(); ++r) {
            if (!p.video_real[r]) continue;
            ++total;
            if (pred[r] == p.frame_labels[r]) ++correct;
        }
    }
    if (total == 0) throw DataError("segmentation eval: no real frames to score");
    out.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    out.frames_scored = total;
    return out;
}

inline SentimentEval sentiment_eval_only(const UniVLModel& model, const Corpus& corpus,
                                         const std::string& split) {
    SentimentEval out;
    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, split, out.eval_split);
    if (pairs.empty()) throw DataError("sentiment eval: split '" + out.eval_split + "' is empty");
    std::vector<double> preds, labels;
    for (const ClipTextPair& p : pairs) {
        preds.push_back(sentiment_predict(model, p));
        labels.push_back(p.sentiment);
    }
    out.metrics = sentiment_metrics(preds, labels);
    out.evaluated = pairs.size();
    return out;
}

inline void write_report(const std::string& path, const std::vector<MetricRecord>& records) {
    std::string text;
    for (const MetricRecord& r : records) {
        const std::string line = to_json(r).dump();
        text += line + "\n";
        std::cout << line << "\n";
    }
    write_file_bytes(path, text);
}

/// Shared tail of finetune/eval: load checkpoint -> model, run the task,
/// write the report and the manifest. `finetune` distinguishes the two
/// commands.
inline int run_task(const TaskArgs& a, bool finetune, const std::string& command) {
    WallClock clock;
    check_task_name(a.task);
    if (finetune && a.task == "localization")
        throw ConfigError("the localization task is evaluated zero-shot and cannot be "
                          "fine-tuned; use 'univl eval --task localization'");

    const LoadedCheckpoint loaded = load_checkpoint(a.ckpt);
    const Corpus corpus = load_corpus(a.corpus_dir);
    check_corpus_fits_model(corpus, loaded.meta.config);

    UniVLModel model = UniVLModel::init(loaded.meta.config, loaded.meta.seed);
    adopt_params(model, loaded.params);

    FinetuneResult ft;
    std::vector<MetricRecord> records;
    const std::uint64_t cs = corpus.spec.seed;
    // The hash in every record names the parameters that produced the
    // numbers: post-fine-tune for `finetune`, the checkpoint as loaded for
    // `eval`.
    auto finish = [&]() { return hash_hex(params_hash(model.params.named())); };

    if (a.task == "retrieval-joint" || a.task == "retrieval-align") {
        const RetrievalMode mode =
            a.task == "retrieval-joint" ? RetrievalMode::joint : RetrievalMode::align;
        if (finetune) ft = retrieval_finetune(model, corpus.train, mode, finetune_config_of(a));
        std::string resolved;
        const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, a.split, resolved);
        if (pairs.empty())
            throw DataError("retrieval eval: split '" + resolved + "' is empty");
        const std::vector<const ClipTextPair*> ptrs = as_ptrs(pairs);
        const RetrievalResult r = mode == RetrievalMode::joint ? retrieve_joint(model, ptrs)
                                                               : retrieve_align(model, ptrs);
        append_retrieval_records(records, a.task, r, finish(), cs);
    } else if (a.task == "caption") {
        CaptionEval ev;
        if (finetune) {
            ev = caption_finetune_and_eval(model, corpus, finetune_config_of(a), a.beam_size,
                                           a.split);
            ft = ev.finetune;
        } else {
            ev = caption_eval_only(model, corpus, a.beam_size, a.split);
        }
        const std::string h = finish();
        records.push_back(metric_record("caption", "bleu3", ev.bleu3, h, cs));
        records.push_back(metric_record("caption", "bleu4", ev.bleu4, h, cs));
        records.push_back(metric_record("caption", "rouge_l", ev.rouge_l, h, cs));
    } else if (a.task == "segmentation") {
        SegmentationEval ev;
        if (finetune) {
            ev = segmentation_finetune_and_eval(model, corpus, finetune_config_of(a), a.split);
            ft = ev.finetune;
        } else {
            ev = segmentation_eval_only(model, corpus, a.split);
        }
        records.push_back(metric_record("segmentation", "frame_accuracy", ev.accuracy, finish(), cs));
    } else if (a.task == "localization") {
        std::string resolved;
        const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, a.split, resolved);
        if (pairs.empty())
            throw DataError("localization eval: split '" + resolved + "' is empty");
        const LocalizationEval ev = step_localization(model, pairs, corpus.vocab);
        for (const std::string& n : ev.notices) std::cerr << "univl: note: " << n << "\n";
        const std::string h = finish();
        records.push_back(metric_record("localization", "recall", ev.recall, h, cs));
        records.push_back(
            metric_record("localization", "random_baseline", ev.random_baseline, h, cs));
    } else {  // sentiment
        SentimentEval ev;
        if (finetune) {
            ev = sentiment_finetune_and_eval(model, corpus, finetune_config_of(a), a.split);
            ft = ev.finetune;
        } else {
            ev = sentiment_eval_only(model, corpus, a.split);
        }
        for (const std::string& n : ev.metrics.notices) std::cerr << "univl: note: " << n << "\n";
        append_sentiment_records(records, ev.metrics, finish(), cs);
    }
    for (const std::string& n : ft.notices) std::cerr << "univl: note: " << n << "\n";

    write_report(a.report_path, records);
    if (finetune && !a.out_ckpt.empty()) {
        CheckpointMeta meta = loaded.meta;
        meta.extra["finetune_task"] = a.task;
        meta.extra["finetune_epochs"] = a.epochs;
        meta.extra["finetune_seed"] = a.seed;
        save_checkpoint(a.out_ckpt, meta, model.params.named());
    }

    RunManifest m;
    m.command = command;
    m.config = nlohmann::ordered_json{{"task", a.task}, {"split", a.split}};
    if (finetune)
        m.config["finetune"] =
            nlohmann::ordered_json{{"epochs", a.epochs},
                                   {"lr", a.lr},
                                   {"batch_size", a.batch_size},
                                   {"warmup_fraction", a.warmup_fraction},
                                   {"seed", a.seed},
                                   {"grad_clip", a.grad_clip}};
    if (a.task == "caption") m.config["beam_size"] = a.beam_size;
    m.seed = a.seed;
    m.git = git_describe();
    m.input_hashes["checkpoint"] = file_hash_hex(a.ckpt);
    m.input_hashes["corpus"] = combined_hash(dir_file_hashes(a.corpus_dir, {"manifest.json"}));
    m.output_hashes["report"] = file_hash_hex(a.report_path);
    if (finetune && !a.out_ckpt.empty())
        m.output_hashes["checkpoint"] = file_hash_hex(a.out_ckpt);
    m.wall_seconds = clock.seconds();
    write_manifest(a.manifest_path.empty() ? a.report_path + ".manifest.json" : a.manifest_path,
                   m);

    if (ft.diverged) {
        std::cerr << "univl: fine-tuning aborted: " << ft.abort_reason
                  << " (the report reflects the rolled-back parameters)\n";
        return kExitNumeric;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// argument registry
// ---------------------------------------------------------------------------

struct CliOptions {
    GenCorpusArgs gen;
    PretrainArgs pre;
    TaskArgs ft, ev;
    CLI::App* gen_cmd = nullptr;
    CLI::App* pre_cmd = nullptr;
    CLI::App* ft_cmd = nullptr;
    CLI::App* ev_cmd = nullptr;
    CLI::Option* gen_seed = nullptr;
    CLI::Option* pre_seed = nullptr;
    CLI::Option* pre_stage = nullptr;
};

/// Builds the full flag registry. Help text is generated from this same
/// registry, so the two cannot drift; a test walks the tree to prove it.
inline std::unique_ptr<CLI::App> make_cli(CliOptions& o) {
    auto app = std::make_unique<CLI::App>("unified video-language pre-training at desk scale");
    app->name("univl");
    app->require_subcommand(1);
    app->footer("Environment:\n"
                "  UNIVL_DESK_THREADS  worker-thread cap for evaluation score fan-outs\n"
                "                      (default 1; results are byte-identical per value)\n"
                "Exit codes: 0 success, 2 usage/config, 3 numeric failure, 4 I/O failure.");

    CLI::App* g = app->add_subcommand("gen-corpus",
                                      "generate a synthetic clip-transcript corpus");
    g->add_option("--spec", o.gen.spec_file, "corpus spec file (key = value lines)")
        ->required();
    g->add_option("--out", o.gen.out_dir, "output corpus directory")->required();
    o.gen_seed = g->add_option("--seed", o.gen.seed, "override the spec file's seed");
    o.gen_cmd = g;

    CLI::App* p = app->add_subcommand("pretrain", "run the two-stage pre-training schedule");
    p->add_option("--config", o.pre.config_file, "training config file (key = value lines)")
        ->required();
    p->add_option("--corpus", o.pre.corpus_dir, "corpus directory from gen-corpus")->required();
    p->add_option("--out", o.pre.out_ckpt, "checkpoint output path (.opt sidecar beside it)")
        ->required();
    p->add_option("--init", o.pre.init_ckpt,
                  "checkpoint to start from (resumes its stage, or feeds stage 2)");
    o.pre_stage = p->add_option("--stage", o.pre.stage, "which stage(s) to run")
                      ->check(CLI::IsMember({"1", "2", "all"}))
                      ->capture_default_str();
    o.pre_seed = p->add_option("--seed", o.pre.seed, "override the config file's seed");
    p->add_option("--ledger", o.pre.ledger_path,
                  "epoch ledger path (default: <out>.ledger.jsonl)");
    p->add_option("--manifest", o.pre.manifest_path,
                  "manifest path (default: <out>.manifest.json)");
    p->add_flag("--no-joint", o.pre.no_joint, "drop the joint loss from the total");
    p->add_flag("--no-align", o.pre.no_align, "drop the alignment loss from the total");
    p->add_flag("--no-cmfm", o.pre.no_cmfm, "drop the masked-frame loss from the total");
    p->add_flag("--no-cmlm", o.pre.no_cmlm, "drop the masked-language loss from the total");
    p->add_flag("--no-decoder", o.pre.no_decoder, "drop the decoder loss from the total");
    p->add_flag("--no-enhancedv", o.pre.no_enhancedv,
                "never drop text conditioning (video-enhancement probability 0)");
    p->add_flag("--no-stagedp", o.pre.no_stagedp, "skip stage 1: train stage 2 from scratch");
    o.pre_cmd = p;

    auto add_task_common = [](CLI::App* c, TaskArgs& t) {
        c->add_option("--task", t.task,
                      "retrieval-joint | retrieval-align | caption | segmentation | "
                      "localization | sentiment")
            ->required();
        c->add_option("--checkpoint", t.ckpt, "pre-trained checkpoint to start from")
            ->required();
        c->add_option("--corpus", t.corpus_dir, "corpus directory from gen-corpus")->required();
        c->add_option("--report", t.report_path, "metric report output (JSON lines)")
            ->required();
        c->add_option("--split", t.split, "evaluation split (auto = val when non-empty)")
            ->check(CLI::IsMember({"auto", "train", "val"}))
            ->capture_default_str();
        c->add_option("--beam-size", t.beam_size, "caption decoding beam width")
            ->capture_default_str();
        c->add_option("--manifest", t.manifest_path,
                      "manifest path (default: <report>.manifest.json)");
    };

    CLI::App* f = app->add_subcommand("finetune",
                                      "fine-tune a task head on the training split, then score");
    add_task_common(f, o.ft);
    f->add_option("--out", o.ft.out_ckpt, "save the fine-tuned checkpoint here");
    f->add_option("--epochs", o.ft.epochs, "fine-tuning epochs")->capture_default_str();
    f->add_option("--lr", o.ft.lr, "fine-tuning learning rate")->capture_default_str();
    f->add_option("--batch-size", o.ft.batch_size, "fine-tuning batch size")
        ->capture_default_str();
    f->add_option("--warmup-fraction", o.ft.warmup_fraction,
                  "fraction of steps spent ramping the learning rate")
        ->capture_default_str();
    f->add_option("--grad-clip", o.ft.grad_clip, "global gradient-norm cap (0 disables)")
        ->capture_default_str();
    f->add_option("--seed", o.ft.seed, "fine-tuning random seed")->capture_default_str();
    o.ft_cmd = f;

    CLI::App* e = app->add_subcommand("eval", "score a checkpoint on a task without training");
    add_task_common(e, o.ev);
    o.ev_cmd = e;

    return app;
}

inline int dispatch_cli(CliOptions& o, const std::string& command) {
    if (o.gen_cmd->parsed()) {
        o.gen.seed_set = o.gen_seed->count() > 0;
        return cmd_gen_corpus(o.gen, command);
    }
    if (o.pre_cmd->parsed()) {
        o.pre.seed_set = o.pre_seed->count() > 0;
        o.pre.stage_set = o.pre_stage->count() > 0;
        return cmd_pretrain(o.pre, command);
    }
    if (o.ft_cmd->parsed()) return run_task(o.ft, true, command);
    if (o.ev_cmd->parsed()) return run_task(o.ev, false, command);
    throw ConfigError("no command given");  // unreachable: require_subcommand(1)
}

inline int run_cli(int argc, const char* const* argv) {
    CliOptions o;
    std::unique_ptr<CLI::App> app = make_cli(o);
    std::string command;
    for (int i = 0; i < argc; ++i) command += (i ? " " : "") + std::string(argv[i]);

    try {
        app->parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        CLI::App* target = app.get();
        while (!target->get_subcommands().empty()) target = target->get_subcommands().front();
        std::cout << target->help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app->help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "univl: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        return dispatch_cli(o, command);
    } catch (const IoError& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ConfigError& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const MaskError& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "univl: error: " << e.what() << "\n";
        return kExitIo;
    }
}

inline int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("univl");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const std::string& s : full) argv.push_back(s.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

} // namespace uvl

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uvl/adam.hpp"
#include "uvl/checkpoint.hpp"
#include "uvl/corpus.hpp"
#include "uvl/masking.hpp"
#include "uvl/model.hpp"
#include "uvl/objectives.hpp"
#include "uvl/rng.hpp"
#include "uvl/serial.hpp"

namespace uvl {

/// Two-stage pre-training settings. Stage 1 trains the unimodal towers under
/// the joint loss at a higher learning rate; stage 2 continues with every
/// module and all five objectives at a decreased one.
struct TrainConfig {
    std::size_t stage1_epochs = 200;
    std::size_t stage2_epochs = 200;
    double stage1_lr = 1e-3;
    double stage2_lr = 1e-4;
    std::size_t batch_size = 16;
    double warmup_fraction = 0.1;  // of each stage's total optimizer steps
    std::uint64_t seed = 1;
    PretrainConfig objectives;          // loss weights, ablation flags, corruption rates
    std::size_t checkpoint_every = 50;  // epochs; 0 = only at stage end
    double grad_clip = 1.0;             // global L2 norm cap; 0 disables

    void validate() const {
        if (stage1_lr <= 0.0 || stage2_lr <= 0.0)
            throw ConfigError("learning rates must be positive");
        if (!(stage2_lr < stage1_lr))
            throw ConfigError("stage2_lr must be below stage1_lr: the second stage "
                              "continues at a decreased rate");
        if (warmup_fraction < 0.0 || warmup_fraction > 0.5)
            throw ConfigError("warmup_fraction must lie in [0, 0.5]");
        if (batch_size < 2)
            throw ConfigError("batch_size must be at least 2: contrastive losses need "
                              "in-batch negatives");
        if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
        objectives.validate();
    }
};

/// Warmup then linear decay: 0 -> base_lr over the first warmup_fraction of
/// steps, then base_lr -> 0 at total_steps. Piecewise linear and continuous;
/// the ramp is never shallower than the decay because warmup_fraction <= 0.5.
inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr,
                    double warmup_fraction) {
    if (total_steps == 0) throw ConfigError("lr_at: total_steps must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction > 0.5)
        throw ConfigError("lr_at: warmup_fraction must lie in [0, 0.5]");
    if (step > total_steps)
        throw ConfigError("lr_at: step " + std::to_string(step) + " beyond " +
                          std::to_string(total_steps) + " total steps");
    const double w = std::floor(warmup_fraction * static_cast<double>(total_steps));
    const double s = static_cast<double>(step);
    if (s < w) return base_lr * s / w;
    return base_lr * (static_cast<double>(total_steps) - s) /
           (static_cast<double>(total_steps) - w);
}

inline constexpr char kOptMagic[4] = {'U', 'V', 'L', 'O'};
inline constexpr std::uint16_t kOptVersion = 1;

/// Optimizer sidecar layout: magic, version, betas/eps, step count, u32 entry
/// count, per entry (u16 name length, name, u64 numel, first moments, second
/// moments), trailing CRC32. Values round-trip bit-exactly so a resumed run
/// replays the uninterrupted trajectory.
inline std::string encode_adam(const AdamState& st) {
    std::string out;
    out.append(kOptMagic, 4);
    put_u16(out, kOptVersion);
    put_f64(out, st.beta1);
    put_f64(out, st.beta2);
    put_f64(out, st.eps);
    put_u64(out, static_cast<std::uint64_t>(st.step_count));
    if (st.m.size() != st.v.size())
        throw NumericError("encode_adam: moment maps disagree in size");
    put_u32(out, static_cast<std::uint32_t>(st.m.size()));
    for (const auto& [name, m] : st.m) {
        const auto vit = st.v.find(name);
        if (vit == st.v.end() || vit->second.size() != m.size())
            throw NumericError("encode_adam: moment maps disagree on '" + name + "'");
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put_u64(out, m.size());
        for (double x : m) put_f64(out, x);
        for (double x : vit->second) put_f64(out, x);
    }
    put_u32(out, crc32(out));
    return out;
}

inline AdamState decode_adam(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 4 || bytes.compare(0, 4, kOptMagic, 4) != 0)
        throw IoError("'" + origin + "' is not an optimizer state (bad magic)");
    if (bytes.size() < 8) throw IoError("'" + origin + "': truncated optimizer state");
    const std::uint32_t stored = crc32(bytes.data(), bytes.size() - 4);
    ByteReader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32("crc") != stored)
        throw IoError("'" + origin + "': checksum mismatch, file is corrupt");

    ByteReader r(bytes.substr(4, bytes.size() - 8));
    const std::uint16_t version = r.u16("version");
    if (version != kOptVersion)
        throw IoError("'" + origin + "': unsupported optimizer state version " +
                      std::to_string(version));
    AdamState st;
    st.beta1 = r.f64("beta1");
    st.beta2 = r.f64("beta2");
    st.eps = r.f64("eps");
    st.step_count = static_cast<std::int64_t>(r.u64("step count"));
    const std::uint32_t count = r.u32("entry count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t nlen = r.u16("name length");
        const std::string name = r.bytes(nlen, "entry name");
        const std::uint64_t numel = r.u64("entry size");
        auto& m = st.m[name];
        auto& v = st.v[name];
        m.resize(numel);
        v.resize(numel);
        for (auto& x : m) x = r.f64("first moment");
        for (auto& x : v) x = r.f64("second moment");
    }
    if (r.remaining() != 0)
        throw IoError("'" + origin + "': trailing bytes after optimizer state");
    return st;
}

inline void save_adam(const std::string& path, const AdamState& st) {
    write_file_bytes(path, encode_adam(st));
}

inline AdamState load_adam(const std::string& path) {
    return decode_adam(read_file_bytes(path), path);
}

/// Order-stable hash over parameter names, shapes, and raw values — the
/// identity used for frozen-parameter checks and run manifests.
inline std::uint64_t params_hash(const NamedParams& params) {
    std::string buf;
    for (const auto& [name, t] : params) {
        buf += name;
        buf.push_back('\0');
        for (std::size_t d : t.shape) put_u64(buf, d);
        for (double v : *t.data) put_f64(buf, v);
    }
    return fnv1a64_bytes(buf.data(), buf.size());
}

/// Copies checkpoint values into an existing model. Both sides enumerate in
/// registry order, so name or shape disagreement means the checkpoint belongs
/// to a different architecture.
inline void adopt_params(UniVLModel& model, const ModelParameters& src) {
    NamedParams dst = model.params.named();
    NamedParams from = src.named();
    if (dst.size() != from.size())
        throw IoError("checkpoint parameter count does not match the model");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].first != from[i].first || dst[i].second.shape != from[i].second.shape)
            throw IoError("checkpoint does not match the model layout at '" + dst[i].first +
                          "'");
        *dst[i].second.data = *from[i].second.data;
    }
}

/// One epoch of the training ledger. Component values are means over the
/// epoch's batches; an ablated component still carries its computed value (a
/// frozen metric), it just has weight 0 in the total. Wall time is
/// deliberately absent: ledgers take part in the bit-identical replay
/// contract, so only deterministic fields belong here.
struct EpochRecord {
    int stage = 0;
    std::size_t epoch = 0;        // 0-based within the stage
    std::size_t global_step = 0;  // optimizer steps finished in this stage
    double lr = 0.0;              // schedule value at the epoch's last step
    double joint = 0.0, cmlm = 0.0, cmfm = 0.0, align = 0.0, decoder = 0.0;
    double total = 0.0;
    std::size_t batches = 0;

    nlohmann::ordered_json to_json() const {
        return nlohmann::ordered_json{
            {"stage", stage},   {"epoch", epoch},     {"global_step", global_step},
            {"lr", lr},         {"joint", joint},     {"cmlm", cmlm},
            {"cmfm", cmfm},     {"align", align},     {"decoder", decoder},
            {"total", total},   {"batches", batches}};
    }
};

/// Callbacks around the epoch loop. All run on the training thread with the
/// model in a consistent (epoch-boundary) state; on_eval receives a
/// read-only view and must not mutate parameters.
struct StageHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const CheckpointMeta&, const UniVLModel&, const AdamState&)> on_checkpoint;
    std::function<void(std::size_t, const UniVLModel&)> on_eval;
};

struct StageResult {
    std::vector<EpochRecord> records;
    std::vector<std::string> notices;
    bool diverged = false;
    std::string abort_reason;      // set when diverged
    std::size_t epochs_done = 0;   // completed epochs within the stage
};

/// Runs the two-stage schedule over the training split. Every random draw
/// derives from (seed, stage label, epoch, batch, slot) counters — nothing
/// carries hidden RNG state — so a run resumed from an epoch-boundary
/// checkpoint replays the remaining epochs bit-identically.
struct Trainer {
    UniVLModel& model;
    const Corpus& corpus;
    TrainConfig cfg;
    StageHooks hooks;
    VideoClipIndex clips;

    Trainer(UniVLModel& m, const Corpus& c, const TrainConfig& tc, StageHooks h = {})
        : model(m), corpus(c), cfg(tc), hooks(std::move(h)) {
        cfg.validate();
        if (corpus.train.size() < 2)
            throw DataError("trainer: the training split needs at least 2 pairs for "
                            "in-batch negatives");
        clips = VideoClipIndex::build(corpus.train);
    }

    /// Constant across epochs: a trailing singleton batch is dropped because
    /// it cannot form contrastive negatives.
    std::size_t batches_per_epoch() const {
        const std::size_t n = corpus.train.size();
        return n / cfg.batch_size + (n % cfg.batch_size >= 2 ? 1 : 0);
    }

    /// Stage 1: only the unimodal towers and their input maps learn, under
    /// the joint loss on uncorrupted pairs. Everything else keeps its exact
    /// initialization.
    StageResult run_stage1(AdamState& adam, std::size_t start_epoch = 0) {
        if (!cfg.objectives.use_joint)
            throw ConfigError("stage 1 trains only the joint loss; it cannot run with "
                              "the joint objective ablated");
        return run_stage(1, cfg.stage1_epochs, cfg.stage1_lr, adam, start_epoch);
    }

    /// Stage 2: all parameters, all five objectives, corrupted inputs.
    StageResult run_stage2(AdamState& adam, std::size_t start_epoch = 0) {
        return run_stage(2, cfg.stage2_epochs, cfg.stage2_lr, adam, start_epoch);
    }

private:
    struct Snapshot {
        std::map<std::string, std::vector<double>> values;
        AdamState adam;
        std::size_t epoch = 0;
    };

    Snapshot snap(const AdamState& adam, std::size_t epoch) const {
        Snapshot s;
        for (const auto& [name, t] : model.params.named()) s.values[name] = *t.data;
        s.adam = adam;
        s.epoch = epoch;
        return s;
    }

    void restore(const Snapshot& s, AdamState& adam) const {
        for (auto& [name, t] : model.params.named()) *t.data = s.values.at(name);
        adam = s.adam;
    }

    CheckpointMeta meta_at(int stage, std::size_t epochs_done, std::size_t global_step) const {
        CheckpointMeta meta;
        meta.config = model.cfg;
        meta.seed = cfg.seed;
        meta.stage = stage;
        meta.epoch = epochs_done;
        meta.global_step = global_step;
        return meta;
    }

    StageResult run_stage(int stage, std::size_t stage_epochs, double base_lr,
                          AdamState& adam, std::size_t start_epoch) {
        if (start_epoch > stage_epochs)
            throw ConfigError("resume epoch " + std::to_string(start_epoch) + " beyond the " +
                              std::to_string(stage_epochs) + "-epoch stage");
        StageResult res;
        res.epochs_done = start_epoch;

        if (stage == 1)
            model.params.set_requires_grad_by(ModelParameters::is_stage1_name);
        else
            model.params.set_all_requires_grad(true);
        NamedParams view = model.params.named();  // after the flags: handles carry them

        const std::size_t bpe = batches_per_epoch();
        const std::size_t total_steps = bpe * stage_epochs;
        if (total_steps == 0) return res;
        if (corpus.train.size() % cfg.batch_size == 1)
            res.notices.push_back("dropping 1 trailing pair each epoch: a singleton batch "
                                  "has no contrastive negatives");

        const std::string tag = stage == 1 ? "s1" : "s2";
        Snapshot good = snap(adam, start_epoch);
        std::size_t global_step = start_epoch * bpe;

        for (std::size_t e = start_epoch; e < stage_epochs; ++e) {
            std::vector<std::size_t> order(corpus.train.size());
            std::iota(order.begin(), order.end(), 0);
            RngStream order_rng = RngStream::derive(cfg.seed, tag + ".order", e);
            order_rng.shuffle(order);

            EpochRecord rec;
            rec.stage = stage;
            rec.epoch = e;
            rec.batches = bpe;

            for (std::size_t b = 0; b < bpe; ++b) {
                const std::size_t lo = b * cfg.batch_size;
                const std::size_t hi = std::min(lo + cfg.batch_size, order.size());
                std::vector<const ClipTextPair*> batch;
                for (std::size_t k = lo; k < hi; ++k) batch.push_back(&corpus.train[order[k]]);

                const double lr = lr_at(global_step, total_steps, base_lr, cfg.warmup_fraction);
                rec.lr = lr;
                model.params.zero_all_grads();
                RngStream drop_rng = RngStream::derive(cfg.seed, tag + ".drop", e, b);
                const FwdCtx ctx{true, &drop_rng};
                try {
                    if (stage == 1) {
                        std::vector<Tensor> t_hats, v_hats;
                        for (const ClipTextPair* p : batch) {
                            const Tensor T = model.encode_text(p->tokens, p->text_real, ctx);
                            const Tensor V = model.encode_video(p->frames, p->video_real, ctx);
                            auto [th, vh] =
                                model.joint_embeddings(T, p->text_real, V, p->video_real);
                            t_hats.push_back(th);
                            v_hats.push_back(vh);
                        }
                        const Tensor joint = loss_joint(stack_rows(t_hats), stack_rows(v_hats),
                                                        PositivePairSet::build(batch));
                        const Tensor total = scale(joint, cfg.objectives.weights.joint);
                        if (!std::isfinite(total.scalar()))
                            throw NumericError("joint loss is not finite");
                        total.backward();
                        rec.joint += joint.scalar();
                        rec.total += total.scalar();
                    } else {
                        std::vector<MaskedPairView> masks;
                        for (std::size_t slot = 0; slot < batch.size(); ++slot) {
                            RngStream crng =
                                RngStream::derive(cfg.seed, "s2.corrupt", e, b, slot);
                            masks.push_back(corrupt_pair(
                                batch[slot]->tokens, batch[slot]->text_real,
                                batch[slot]->frames, batch[slot]->video_real, model.cfg,
                                cfg.objectives.mask_rate, cfg.objectives.enhancedv_prob, crng));
                        }
                        RngStream lrng = RngStream::derive(cfg.seed, "s2.loss", e, b);
                        const LossBundle bundle = pretrain_losses(model, batch, masks, clips,
                                                                  cfg.objectives, lrng, ctx);
                        bundle.total.backward();
                        rec.joint += bundle.joint.scalar();
                        rec.cmlm += bundle.cmlm.scalar();
                        rec.cmfm += bundle.cmfm.scalar();
                        rec.align += bundle.align.scalar();
                        rec.decoder += bundle.decoder.scalar();
                        rec.total += bundle.total.scalar();
                    }
                } catch (const NumericError& err) {
                    restore(good, adam);
                    res.diverged = true;
                    res.abort_reason = std::string(err.what()) + " at stage " +
                                       std::to_string(stage) + " epoch " + std::to_string(e) +
                                       " batch " + std::to_string(b) + "; restored the epoch-" +
                                       std::to_string(good.epoch) + " state";
                    break;
                }
                if (cfg.grad_clip > 0.0) clip_global_norm(view, cfg.grad_clip);
                adam_step(view, adam, lr);
                ++global_step;
            }
            if (res.diverged) break;

            const double inv = 1.0 / static_cast<double>(bpe);
            rec.joint *= inv;
            rec.cmlm *= inv;
            rec.cmfm *= inv;
            rec.align *= inv;
            rec.decoder *= inv;
            rec.total *= inv;
            rec.global_step = global_step;
            res.records.push_back(rec);
            res.epochs_done = e + 1;
            if (hooks.on_epoch) hooks.on_epoch(rec);
            if (hooks.on_eval) hooks.on_eval(e, model);
            good = snap(adam, e + 1);

            const bool last = e + 1 == stage_epochs;
            const bool due =
                cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0;
            if (hooks.on_checkpoint && (last || due))
                hooks.on_checkpoint(meta_at(stage, e + 1, global_step), model, adam);
        }

        if (res.diverged && hooks.on_checkpoint) {
            CheckpointMeta meta = meta_at(stage, good.epoch, good.epoch * bpe);
            meta.extra["restored_after_divergence"] = true;
            hooks.on_checkpoint(meta, model, adam);
        }
        return res;
    }
};

struct PretrainResult {
    StageResult stage1, stage2;
};

/// Full schedule: stage 1 then stage 2, each with a fresh optimizer and a
/// restarted warmup+decay schedule.
inline PretrainResult pretrain(UniVLModel& model, const Corpus& corpus, const TrainConfig& cfg,
                               const StageHooks& hooks = {}) {
    Trainer tr(model, corpus, cfg, hooks);
    PretrainResult out;
    AdamState adam1;
    out.stage1 = tr.run_stage1(adam1);
    if (out.stage1.diverged) return out;
    AdamState adam2;
    out.stage2 = tr.run_stage2(adam2);
    return out;
}

} // namespace uvl

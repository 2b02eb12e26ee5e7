#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uvl/corpus.hpp"
#include "uvl/masking.hpp"
#include "uvl/model.hpp"

namespace uvl {

struct LossWeights {
    double joint = 1.0, cmlm = 1.0, cmfm = 1.0, align = 1.0, decoder = 1.0;
};

/// The five loss scalars plus their weighted total. `total` is built by
/// left-fold of scale/add, so total == sum_i w_i * l_i holds by construction.
struct LossBundle {
    Tensor joint, cmlm, cmfm, align, decoder, total;
    LossWeights weights;
    std::vector<std::string> notices;
};

/// Per-anchor positive partners within a batch: the pair itself plus clips of
/// the same video whose clip index differs by at most one (narration drift
/// tolerance — a transcript may describe the neighboring clip).
struct PositivePairSet {
    std::vector<std::vector<std::size_t>> members;

    static PositivePairSet build(const std::vector<const ClipTextPair*>& batch) {
        PositivePairSet p;
        p.members.resize(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t j = 0; j < batch.size(); ++j) {
                if (batch[j]->video_id != batch[i]->video_id) continue;
                const auto a = batch[i]->clip_index, b = batch[j]->clip_index;
                if ((a > b ? a - b : b - a) <= 1) p.members[i].push_back(j);
            }
        return p;
    }
};

/// -log softmax(scores)[target] for one candidate row — the NCE cell every
/// contrastive loss here reduces to.
inline Tensor nce_row_loss(const Tensor& scores, std::size_t target) {
    return cross_entropy(scores, {static_cast<int>(target)});
}

/// Symmetric MIL-NCE on a score matrix S[i][j] = v_hat_i . t_hat_j: both
/// contrast directions, averaged over 2B anchor terms.
inline Tensor mil_nce_from_scores(const Tensor& S, const PositivePairSet& positives) {
    detail::check_matrix(S, "mil_nce_from_scores");
    const std::size_t B = S.shape[0];
    if (S.shape[1] != B)
        throw ShapeError("mil_nce_from_scores: score matrix must be square, got " +
                         shape_str(S.shape));
    if (B < 2) throw DataError("joint loss needs a batch of at least 2 pairs, got " +
                               std::to_string(B));
    if (positives.members.size() != B)
        throw DataError("mil_nce_from_scores: positive sets cover " +
                        std::to_string(positives.members.size()) + " anchors for batch " +
                        std::to_string(B));

    Tensor acc = Tensor::scalar_of(0.0);
    for (std::size_t i = 0; i < B; ++i) {
        if (positives.members[i].empty())
            throw DataError("mil_nce_from_scores: anchor " + std::to_string(i) +
                            " has an empty positive set");
        // fix v_i, contrast transcripts (row i); fix t_i, contrast clips (column i)
        const Tensor row = transpose(slice_rows(S, i, 1));
        const Tensor col = slice_cols(S, i, 1);
        for (const Tensor& cands : {row, col}) {
            Tensor pos = index_select(cands, positives.members[i]);
            acc = add(acc, sub(logsumexp_all(cands), logsumexp_all(pos)));
        }
    }
    return scale(acc, 1.0 / (2.0 * static_cast<double>(B)));
}

/// MIL-NCE over pooled UNCORRUPTED single-modal embeddings, stacked [B x d].
inline Tensor loss_joint(const Tensor& t_hats, const Tensor& v_hats,
                         const PositivePairSet& positives) {
    return mil_nce_from_scores(matmul(v_hats, transpose(t_hats)), positives);
}

/// Ground-truth transcript without CLS/SEP framing, for the decoder target.
inline std::vector<int> transcript_body(const std::vector<int>& tokens, const BoolVec& real,
                                        const ModelConfig& cfg) {
    std::vector<int> body;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (!real[i] || tokens[i] == cfg.sep_id) break;
        body.push_back(tokens[i]);
    }
    return body;
}

/// Everything pretrain_losses needs to know besides the batch itself.
struct PretrainConfig {
    LossWeights weights;
    bool use_joint = true, use_cmlm = true, use_cmfm = true, use_align = true,
         use_decoder = true;
    std::size_t cmfm_pool_cap = 512;
    std::size_t align_batch_negatives = 3;
    double mask_rate = 0.15;
    double enhancedv_prob = 0.15;

    void validate() const {
        if (cmfm_pool_cap < 2)
            throw ConfigError("cmfm_pool_cap must be at least 2 (a target needs a distractor)");
        if (mask_rate < 0.0 || mask_rate >= 1.0)
            throw ConfigError("mask_rate must be in [0, 1)");
        if (enhancedv_prob < 0.0 || enhancedv_prob > 1.0)
            throw ConfigError("enhancedv_prob must be in [0, 1]");
    }
};

/// Clip lookup by video, for same-video alignment negatives.
struct VideoClipIndex {
    std::map<std::string, std::vector<const ClipTextPair*>> by_video;

    static VideoClipIndex build(const std::vector<ClipTextPair>& pairs) {
        VideoClipIndex idx;
        for (const auto& p : pairs) idx.by_video[p.video_id].push_back(&p);
        return idx;
    }
};

/// Weighted combination with NaN detection. Component order and names are
/// fixed; a non-finite component aborts naming the culprit.
inline LossBundle combine(Tensor joint, Tensor cmlm, Tensor cmfm, Tensor align, Tensor decoder,
                          const LossWeights& w = {}, std::vector<std::string> notices = {}) {
    LossBundle b;
    b.joint = std::move(joint);
    b.cmlm = std::move(cmlm);
    b.cmfm = std::move(cmfm);
    b.align = std::move(align);
    b.decoder = std::move(decoder);
    b.weights = w;
    b.notices = std::move(notices);

    const std::pair<const char*, const Tensor*> parts[] = {
        {"joint", &b.joint}, {"cmlm", &b.cmlm}, {"cmfm", &b.cmfm},
        {"align", &b.align}, {"decoder", &b.decoder}};
    for (const auto& [name, t] : parts)
        if (!std::isfinite(t->scalar()))
            throw NumericError(std::string("loss component '") + name + "' is not finite (" +
                               std::to_string(t->scalar()) + ")");

    b.total = scale(b.joint, w.joint);
    b.total = add(b.total, scale(b.cmlm, w.cmlm));
    b.total = add(b.total, scale(b.cmfm, w.cmfm));
    b.total = add(b.total, scale(b.align, w.align));
    b.total = add(b.total, scale(b.decoder, w.decoder));
    return b;
}

/// CMLM: cross-entropy of the MLM head over masked text positions only.
/// All-ignore batches (every pair video-only masked) contribute exactly zero.
inline Tensor loss_cmlm(const UniVLModel& model, const std::vector<EncodingBundle>& encs,
                        const std::vector<const ClipTextPair*>& batch,
                        const std::vector<MaskedPairView>& masks,
                        std::vector<std::string>& notices) {
    std::vector<Tensor> logit_blocks;
    std::vector<int> targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t n = batch[b]->tokens.size();
        logit_blocks.push_back(model.mlm_logits(encs[b].cross, n));
        targets.insert(targets.end(), masks[b].text.targets.begin(),
                       masks[b].text.targets.end());
    }
    const bool any = std::any_of(targets.begin(), targets.end(),
                                 [](int t) { return t != kIgnoreTarget; });
    if (!any) {
        notices.push_back("cmlm: every pair in the batch is video-only masked; "
                          "contributing exactly 0");
        return Tensor::scalar_of(0.0);
    }
    return cross_entropy(concat_rows(logit_blocks), targets, kIgnoreTarget);
}

/// CMFM: for each masked frame, NCE of its cross output against the linear
/// projections of every real ORIGINAL frame in the batch (its own included),
/// pool capped by uniform subsampling with the anchor's target kept reachable.
inline Tensor loss_cmfm(const UniVLModel& model, const std::vector<EncodingBundle>& encs,
                        const std::vector<const ClipTextPair*>& batch,
                        const std::vector<MaskedPairView>& masks, std::size_t pool_cap,
                        RngStream& rng) {
    std::vector<std::pair<std::size_t, std::size_t>> pool; // (pair, frame row)
    for (std::size_t b = 0; b < batch.size(); ++b)
        for (std::size_t r = 0; r < batch[b]->video_real.size(); ++r)
            if (batch[b]->video_real[r]) pool.push_back({b, r});
    if (pool.size() < 2)
        throw DataError("cmfm loss: candidate pool has " + std::to_string(pool.size()) +
                        " frame(s); no negatives exist");
    if (pool.size() > pool_cap) {
        rng.shuffle(pool);
        pool.resize(pool_cap);
    }
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> pool_slot;
    for (std::size_t k = 0; k < pool.size(); ++k) pool_slot[pool[k]] = k;

    std::vector<Tensor> pooled_rows;
    for (const auto& [b, r] : pool) pooled_rows.push_back(slice_rows(batch[b]->frames, r, 1));
    const Tensor proj = add_bias(matmul(concat_rows(pooled_rows), model.params.cmfm_w),
                                 model.params.cmfm_b); // [K x d]
    const Tensor proj_t = transpose(proj);

    Tensor acc = Tensor::scalar_of(0.0);
    std::size_t anchors = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t n = batch[b]->tokens.size();
        for (std::size_t r : masks[b].frames.positions) {
            const Tensor m_vec = slice_rows(encs[b].cross, n + r, 1); // [1 x d]
            Tensor row = matmul(m_vec, proj_t);                       // [1 x K]
            std::size_t target;
            auto slot = pool_slot.find({b, r});
            if (slot != pool_slot.end()) {
                target = slot->second;
            } else { // subsampled away: append the anchor's own candidate
                const Tensor own = add_bias(
                    matmul(slice_rows(batch[b]->frames, r, 1), model.params.cmfm_w),
                    model.params.cmfm_b);
                row = concat_cols({row, matmul(m_vec, transpose(own))});
                target = pool.size();
            }
            acc = add(acc, nce_row_loss(row, target));
            ++anchors;
        }
    }
    return scale(acc, 1.0 / static_cast<double>(anchors));
}

/// Alignment: the positive cross pass's CLS score against mismatched pairs —
/// up to `batch_negatives` cyclically-next batch videos plus one resampled
/// clip of the same video (corrupted like everything else this step sees).
inline Tensor loss_align(const UniVLModel& model, const std::vector<EncodingBundle>& encs,
                         const std::vector<const ClipTextPair*>& batch,
                         const std::vector<MaskedPairView>& masks, const VideoClipIndex& clips,
                         std::size_t batch_negatives, double mask_rate, RngStream& rng,
                         const FwdCtx& ctx) {
    const std::size_t B = batch.size();
    Tensor acc = Tensor::scalar_of(0.0);
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<Tensor> scores{model.align_score(encs[i].cross)};
        const std::size_t take = std::min(batch_negatives, B - 1);
        for (std::size_t step = 1; step <= take; ++step) {
            const std::size_t j = (i + step) % B;
            const EncodingBundle neg = model.encode_pair(
                masks[i].text.corrupted, batch[i]->text_real, masks[j].frames.corrupted,
                batch[j]->video_real, ctx);
            scores.push_back(model.align_score(neg.cross));
        }
        auto vit = clips.by_video.find(batch[i]->video_id);
        if (vit != clips.by_video.end() && vit->second.size() >= 2) {
            std::vector<const ClipTextPair*> others;
            for (const ClipTextPair* c : vit->second)
                if (c->clip_index != batch[i]->clip_index) others.push_back(c);
            if (!others.empty()) {
                const ClipTextPair* re = others[rng.uniform_index(others.size())];
                const FrameMaskResult fm =
                    mask_frames(re->frames, re->video_real, mask_rate, rng);
                const EncodingBundle neg = model.encode_pair(
                    masks[i].text.corrupted, batch[i]->text_real, fm.corrupted,
                    re->video_real, ctx);
                scores.push_back(model.align_score(neg.cross));
            }
        }
        if (scores.size() < 2)
            throw DataError("alignment loss: pair " + batch[i]->video_id + "#" +
                            std::to_string(batch[i]->clip_index) + " has no negative clips");
        acc = add(acc, nce_row_loss(concat_cols(scores), 0));
    }
    return scale(acc, 1.0 / static_cast<double>(B));
}

/// Teacher-forced reconstruction of the UNCORRUPTED transcript from the
/// corrupted cross encoding: input BOS + body, target body + EOS.
inline Tensor loss_decoder(const UniVLModel& model, const std::vector<EncodingBundle>& encs,
                           const std::vector<const ClipTextPair*>& batch,
                           const FwdCtx& ctx) {
    std::vector<Tensor> logit_blocks;
    std::vector<int> targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::vector<int> body =
            transcript_body(batch[b]->tokens, batch[b]->text_real, model.cfg);
        if (body.empty())
            throw DataError("decoder loss: pair " + batch[b]->video_id + "#" +
                            std::to_string(batch[b]->clip_index) + " has an empty transcript");
        std::vector<int> input{model.cfg.bos_id};
        input.insert(input.end(), body.begin(), body.end());
        BoolVec mem_real = batch[b]->text_real;
        mem_real.insert(mem_real.end(), batch[b]->video_real.begin(),
                        batch[b]->video_real.end());
        logit_blocks.push_back(model.decode_logits(encs[b].cross, mem_real, input, ctx));
        targets.insert(targets.end(), body.begin(), body.end());
        targets.push_back(model.cfg.eos_id);
    }
    return cross_entropy(concat_rows(logit_blocks), targets);
}

/// One pre-training forward pass over a corrupted batch, producing all five
/// losses. Encoding order is fixed for determinism: uncorrupted towers for
/// the joint loss (batch order), then corrupted cross passes, then CMLM,
/// alignment negatives, the CMFM pool draw, and the decoder. An ablated loss
/// is still computed (without building a graph) so it can be logged as a
/// frozen metric; only its contribution to the total is dropped. Keeping the
/// computation also keeps the RNG draw sequence identical across ablations.
inline LossBundle pretrain_losses(const UniVLModel& model,
                                  const std::vector<const ClipTextPair*>& batch,
                                  const std::vector<MaskedPairView>& masks,
                                  const VideoClipIndex& clips, const PretrainConfig& pcfg,
                                  RngStream& rng, const FwdCtx& ctx) {
    pcfg.validate();
    if (batch.empty()) throw DataError("pretrain_losses: empty batch");
    if (masks.size() != batch.size())
        throw DataError("pretrain_losses: " + std::to_string(masks.size()) +
                        " corruptions for " + std::to_string(batch.size()) + " pairs");
    std::vector<std::string> notices;

    LossWeights eff = pcfg.weights;
    auto ablate = [&notices](bool enabled, double& weight, const char* name) {
        if (enabled) return;
        weight = 0.0;
        notices.push_back(std::string(name) +
                          " loss ablated: logged but excluded from total");
    };
    ablate(pcfg.use_joint, eff.joint, "joint");
    ablate(pcfg.use_cmlm, eff.cmlm, "cmlm");
    ablate(pcfg.use_cmfm, eff.cmfm, "cmfm");
    ablate(pcfg.use_align, eff.align, "align");
    ablate(pcfg.use_decoder, eff.decoder, "decoder");

    // Runs the component forward normally when it feeds the total, or with
    // graph construction off when it is only being logged.
    auto compute = [](bool enabled, auto&& fn) -> Tensor {
        if (enabled) return fn();
        NoGradGuard freeze;
        return fn();
    };

    const Tensor joint = compute(pcfg.use_joint, [&] {
        std::vector<Tensor> t_hats, v_hats;
        for (const ClipTextPair* p : batch) {
            const Tensor T = model.encode_text(p->tokens, p->text_real, ctx);
            const Tensor V = model.encode_video(p->frames, p->video_real, ctx);
            auto [t_hat, v_hat] = model.joint_embeddings(T, p->text_real, V, p->video_real);
            t_hats.push_back(t_hat);
            v_hats.push_back(v_hat);
        }
        return loss_joint(stack_rows(t_hats), stack_rows(v_hats),
                          PositivePairSet::build(batch));
    });

    const bool any_cross = pcfg.use_cmlm || pcfg.use_cmfm || pcfg.use_align ||
                           pcfg.use_decoder;
    std::vector<EncodingBundle> encs;
    {
        // The corrupted cross encodings back every loss except the joint one;
        // skip the graph when none of their consumers train on them.
        std::optional<NoGradGuard> freeze;
        if (!any_cross) freeze.emplace();
        for (std::size_t b = 0; b < batch.size(); ++b)
            encs.push_back(model.encode_pair(masks[b].text.corrupted, batch[b]->text_real,
                                             masks[b].frames.corrupted,
                                             batch[b]->video_real, ctx));
    }

    const Tensor cmlm = compute(pcfg.use_cmlm, [&] {
        return loss_cmlm(model, encs, batch, masks, notices);
    });
    const Tensor align = compute(pcfg.use_align, [&] {
        return loss_align(model, encs, batch, masks, clips, pcfg.align_batch_negatives,
                          pcfg.mask_rate, rng, ctx);
    });
    const Tensor cmfm = compute(pcfg.use_cmfm, [&] {
        return loss_cmfm(model, encs, batch, masks, pcfg.cmfm_pool_cap, rng);
    });
    const Tensor decoder = compute(pcfg.use_decoder, [&] {
        return loss_decoder(model, encs, batch, ctx);
    });

    return combine(joint, cmlm, cmfm, align, decoder, eff, std::move(notices));
}

} // namespace uvl


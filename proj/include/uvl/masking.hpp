#pragma once

#include <cstdint>
#include <vector>

#include "uvl/model.hpp"

namespace uvl {

/// Token corruption for masked-recovery training.
struct TokenMaskResult {
    std::vector<int> corrupted;          // ids with MASK substituted
    std::vector<int> targets;            // original id where masked, ignore_index elsewhere
    std::vector<std::size_t> positions;  // masked positions, ascending
};

inline constexpr int kIgnoreTarget = -1;

/// Independently mask each maskable position with probability `rate`,
/// replacing with the MASK id (the recipe here is plain replacement — an
/// optional flag restores the BERT 80/10/10 split). If the draw selects
/// nothing, one maskable position is forced so the loss stays defined.
/// CLS/SEP/PAD are never maskable.
inline TokenMaskResult mask_tokens(const std::vector<int>& tokens, const BoolVec& real,
                                   const ModelConfig& cfg, double rate, RngStream& rng,
                                   bool bert_split = false) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("mask_tokens: rate must be in [0, 1), got " + std::to_string(rate));
    if (real.size() != tokens.size())
        throw MaskError("mask_tokens: mask length " + std::to_string(real.size()) + " vs tokens " +
                        std::to_string(tokens.size()));
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!real[i]) continue;
        const int id = tokens[i];
        if (id == cfg.pad_id || id == cfg.cls_id || id == cfg.sep_id) continue;
        maskable.push_back(i);
    }
    if (maskable.empty()) throw MaskError("mask_tokens: sequence has no maskable positions");

    TokenMaskResult out;
    out.corrupted = tokens;
    out.targets.assign(tokens.size(), kIgnoreTarget);
    for (std::size_t i : maskable)
        if (rng.bernoulli(rate)) out.positions.push_back(i);
    if (out.positions.empty())
        out.positions.push_back(maskable[rng.uniform_index(maskable.size())]);
    for (std::size_t i : out.positions) {
        out.targets[i] = tokens[i];
        if (!bert_split) {
            out.corrupted[i] = cfg.mask_id;
        } else {
            const double u = rng.uniform01();
            if (u < 0.8)
                out.corrupted[i] = cfg.mask_id;
            else if (u < 0.9)
                out.corrupted[i] = static_cast<int>(rng.uniform_index(cfg.vocab_size));
            // else: keep the original id, target still trains
        }
    }
    return out;
}

/// Frame corruption: selected real frames become exact zero rows.
struct FrameMaskResult {
    Tensor corrupted;                    // copy of the features with rows zeroed
    std::vector<std::size_t> positions;  // masked frame indices, ascending
};

inline FrameMaskResult mask_frames(const Tensor& frames, const BoolVec& real, double rate,
                                   RngStream& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("mask_frames: rate must be in [0, 1), got " + std::to_string(rate));
    detail::check_matrix(frames, "mask_frames");
    if (real.size() != frames.shape[0])
        throw MaskError("mask_frames: mask length " + std::to_string(real.size()) + " vs frames " +
                        std::to_string(frames.shape[0]));
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < real.size(); ++i)
        if (real[i]) candidates.push_back(i);
    if (candidates.empty()) throw MaskError("mask_frames: no real frames to mask");

    FrameMaskResult out;
    out.corrupted = Tensor::from_values(frames.shape, *frames.data);
    for (std::size_t i : candidates)
        if (rng.bernoulli(rate)) out.positions.push_back(i);
    if (out.positions.empty())
        out.positions.push_back(candidates[rng.uniform_index(candidates.size())]);
    for (std::size_t r : out.positions)
        for (std::size_t c = 0; c < frames.shape[1]; ++c) out.corrupted.at(r, c) = 0.0;
    return out;
}

/// Whole-text corruption: every real token (CLS and SEP included) becomes
/// MASK and the recovery targets are all-ignore — the pair must be
/// reconstructed from video through the decoder instead.
inline TokenMaskResult apply_enhancedv(const std::vector<int>& tokens, const BoolVec& real,
                                       const ModelConfig& cfg) {
    if (real.size() != tokens.size())
        throw MaskError("apply_enhancedv: mask length " + std::to_string(real.size()) +
                        " vs tokens " + std::to_string(tokens.size()));
    TokenMaskResult out;
    out.corrupted = tokens;
    out.targets.assign(tokens.size(), kIgnoreTarget);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!real[i]) continue;
        out.corrupted[i] = cfg.mask_id;
        out.positions.push_back(i);
    }
    return out;
}

/// One pair's corrupted view for a pre-training step.
struct MaskedPairView {
    TokenMaskResult text;
    FrameMaskResult frames;
    bool enhancedv = false;
};

/// Corrupt one clip-text pair: EnhancedV whole-text replacement with
/// probability `enhancedv_prob` (when enabled), otherwise per-token masking;
/// frames are always masked independently.
inline MaskedPairView corrupt_pair(const std::vector<int>& tokens, const BoolVec& text_real,
                                   const Tensor& frames, const BoolVec& video_real,
                                   const ModelConfig& cfg, double mask_rate,
                                   double enhancedv_prob, RngStream& rng) {
    MaskedPairView v;
    v.enhancedv = rng.bernoulli(enhancedv_prob); // always draws, keeping streams aligned

    if (v.enhancedv)
        v.text = apply_enhancedv(tokens, text_real, cfg);
    else
        v.text = mask_tokens(tokens, text_real, cfg, mask_rate, rng);
    v.frames = mask_frames(frames, video_real, mask_rate, rng);
    return v;
}

} // namespace uvl

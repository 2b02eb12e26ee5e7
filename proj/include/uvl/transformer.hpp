#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uvl/ops.hpp"

namespace uvl {

struct BlockConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    double dropout_rate = 0.1;
    GeluKind gelu_kind = GeluKind::Exact;

    void validate() const {
        if (d == 0 || heads == 0) throw ConfigError("block config: d and heads must be positive");
        if (d % heads != 0)
            throw ConfigError("block config: d=" + std::to_string(d) +
                              " is not divisible by heads=" + std::to_string(heads));
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("block config: dropout must be in [0, 1)");
    }
    std::size_t head_dim() const { return d / heads; }
};

/// Shared forward-pass context. Evaluation runs with train=false and no rng;
/// training passes a stream derived from (seed, purpose, stage, epoch, batch).
struct FwdCtx {
    bool train = false;
    RngStream* rng = nullptr;
};

inline Tensor maybe_dropout(const Tensor& x, double rate, const FwdCtx& ctx) {
    if (!ctx.train || rate == 0.0) return x;
    if (ctx.rng == nullptr) throw ConfigError("dropout in training mode needs an rng stream");
    return dropout(x, rate, true, *ctx.rng);
}

/// Which (query, key) pairs may attend. Padding masks let every query see all
/// real keys; causal masks additionally forbid looking ahead.
struct AttentionMask {
    std::size_t q_len = 0;
    std::size_t k_len = 0;
    bool is_causal = false;
    std::vector<std::uint8_t> allowed; // q_len * k_len, row-major

    bool at(std::size_t i, std::size_t j) const { return allowed[i * k_len + j] != 0; }

    static AttentionMask full(std::size_t q, std::size_t k) {
        AttentionMask m;
        m.q_len = q;
        m.k_len = k;
        m.allowed.assign(q * k, 1);
        return m;
    }

    // Every query row may attend to each real key position.
    static AttentionMask padding(std::size_t q, const BoolVec& key_real) {
        AttentionMask m;
        m.q_len = q;
        m.k_len = key_real.size();
        m.allowed.assign(q * m.k_len, 0);
        for (std::size_t i = 0; i < q; ++i)
            for (std::size_t j = 0; j < m.k_len; ++j)
                m.allowed[i * m.k_len + j] = key_real[j] ? 1 : 0;
        return m;
    }

    // Position i sees real positions j <= i.
    static AttentionMask causal(const BoolVec& real) {
        AttentionMask m;
        m.q_len = m.k_len = real.size();
        m.is_causal = true;
        m.allowed.assign(m.q_len * m.k_len, 0);
        for (std::size_t i = 0; i < m.q_len; ++i)
            for (std::size_t j = 0; j <= i; ++j)
                m.allowed[i * m.k_len + j] = real[j] ? 1 : 0;
        return m;
    }
};

/// Row-wise softmax restricted to allowed keys. Masked entries come out as
/// exact zeros and receive no gradient; a row with nothing allowed is an error.
inline Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
    detail::check_matrix(scores, "masked_softmax");
    const std::size_t n = scores.shape[0], k = scores.shape[1];
    if (mask.q_len != n || mask.k_len != k)
        throw MaskError("masked_softmax: mask is " + std::to_string(mask.q_len) + "x" +
                        std::to_string(mask.k_len) + " but scores are " + shape_str(scores.shape));
    Tensor out = Tensor::zeros(scores.shape);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < k; ++j)
            if (mask.at(i, j)) {
                any = true;
                mx = std::max(mx, scores.at(i, j));
            }
        if (!any)
            throw MaskError("masked_softmax: row " + std::to_string(i) + " has no allowed keys");
        if (!std::isfinite(mx))
            throw NumericError("masked_softmax: row " + std::to_string(i) +
                               " has no finite score");
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (!mask.at(i, j)) continue;
            const double e = std::exp(scores.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < k; ++j)
            if (mask.at(i, j)) out.at(i, j) /= z;
    }
    const auto allowed = mask.allowed;
    attach_node(out, {scores}, [scores, allowed, n, k](const Tensor& o) {
        if (!scores.requires_grad) return;
        const auto& y = *o.data;
        const auto& g = *o.grad;
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j)
                if (allowed[i * k + j]) dot += g[i * k + j] * y[i * k + j];
            for (std::size_t j = 0; j < k; ++j) {
                if (!allowed[i * k + j]) continue;
                const std::size_t idx = i * k + j;
                (*scores.grad)[idx] += y[idx] * (g[idx] - dot);
            }
        }
    });
    return out;
}

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
    Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
    AttnParams attn;
    FfnParams ffn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct DecoderLayerParams {
    AttnParams self_attn;
    AttnParams cross_attn;
    FfnParams ffn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
};

/// Scaled dot-product attention over `heads` column slices. Queries come from
/// q_in [n x d], keys/values from kv_in [m x d]; score scale is 1/sqrt(d/heads).
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, const AttnParams& p,
                                   const AttentionMask& mask, const BlockConfig& cfg) {
    cfg.validate();
    const std::size_t dh = cfg.head_dim();
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor Q = add_bias(matmul(q_in, p.wq), p.bq);
    Tensor K = add_bias(matmul(kv_in, p.wk), p.bk);
    Tensor V = add_bias(matmul(kv_in, p.wv), p.bv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(Q, h * dh, dh);
        Tensor kh = slice_cols(K, h * dh, dh);
        Tensor vh = slice_cols(V, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), scl);
        Tensor attn = masked_softmax(scores, mask);
        head_outs.push_back(matmul(attn, vh));
    }
    Tensor merged = concat_cols(head_outs);
    return add_bias(matmul(merged, p.wo), p.bo);
}

inline Tensor ffn_forward(const Tensor& x, const FfnParams& p, const BlockConfig& cfg) {
    Tensor h = gelu(add_bias(matmul(x, p.w1), p.b1), cfg.gelu_kind);
    return add_bias(matmul(h, p.w2), p.b2);
}

/// Post-norm encoder block: LN(x + attn), then LN(h + ffn).
inline Tensor encoder_layer(const Tensor& x, const EncoderLayerParams& p, const AttentionMask& mask,
                            const BlockConfig& cfg, const FwdCtx& ctx) {
    Tensor a = maybe_dropout(multi_head_attention(x, x, p.attn, mask, cfg), cfg.dropout_rate, ctx);
    Tensor h = layer_norm(add(x, a), p.ln1_g, p.ln1_b);
    Tensor f = maybe_dropout(ffn_forward(h, p.ffn, cfg), cfg.dropout_rate, ctx);
    return layer_norm(add(h, f), p.ln2_g, p.ln2_b);
}

/// Zero layers means the stack is the identity map.
inline Tensor encoder_stack(const Tensor& x, const std::vector<EncoderLayerParams>& layers,
                            const AttentionMask& mask, const BlockConfig& cfg, const FwdCtx& ctx) {
    Tensor h = x;
    for (const auto& layer : layers) h = encoder_layer(h, layer, mask, cfg, ctx);
    return h;
}

/// Post-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, then the feed-forward, each with residual + LN.
inline Tensor decoder_layer(const Tensor& x, const Tensor& memory, const DecoderLayerParams& p,
                            const AttentionMask& self_mask, const AttentionMask& mem_mask,
                            const BlockConfig& cfg, const FwdCtx& ctx) {
    if (!self_mask.is_causal)
        throw MaskError("decoder self-attention requires a causal mask");
    Tensor a = maybe_dropout(multi_head_attention(x, x, p.self_attn, self_mask, cfg),
                             cfg.dropout_rate, ctx);
    Tensor h1 = layer_norm(add(x, a), p.ln1_g, p.ln1_b);
    Tensor c = maybe_dropout(multi_head_attention(h1, memory, p.cross_attn, mem_mask, cfg),
                             cfg.dropout_rate, ctx);
    Tensor h2 = layer_norm(add(h1, c), p.ln2_g, p.ln2_b);
    Tensor f = maybe_dropout(ffn_forward(h2, p.ffn, cfg), cfg.dropout_rate, ctx);
    return layer_norm(add(h2, f), p.ln3_g, p.ln3_b);
}

inline Tensor decoder_stack(const Tensor& x, const Tensor& memory,
                            const std::vector<DecoderLayerParams>& layers,
                            const AttentionMask& self_mask, const AttentionMask& mem_mask,
                            const BlockConfig& cfg, const FwdCtx& ctx) {
    Tensor h = x;
    for (const auto& layer : layers)
        h = decoder_layer(h, memory, layer, self_mask, mem_mask, cfg, ctx);
    return h;
}

} // namespace uvl

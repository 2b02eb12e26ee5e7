#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/gradcheck.hpp"
#include "uvl/transformer.hpp"

using namespace uvl;
using Catch::Matchers::WithinAbs;

namespace {

BlockConfig tiny_block() {
    BlockConfig b;
    b.d = 4;
    b.heads = 2;
    b.ffn_dim = 8;
    b.dropout_rate = 0.0;
    return b;
}

AttnParams rand_attn(RngStream& rng, std::size_t d) {
    AttnParams a;
    a.wq = Tensor::randn({d, d}, rng, 0.3);
    a.bq = Tensor::randn({d}, rng, 0.1);
    a.wk = Tensor::randn({d, d}, rng, 0.3);
    a.bk = Tensor::randn({d}, rng, 0.1);
    a.wv = Tensor::randn({d, d}, rng, 0.3);
    a.bv = Tensor::randn({d}, rng, 0.1);
    a.wo = Tensor::randn({d, d}, rng, 0.3);
    a.bo = Tensor::randn({d}, rng, 0.1);
    return a;
}

FfnParams rand_ffn(RngStream& rng, std::size_t d, std::size_t f) {
    FfnParams p;
    p.w1 = Tensor::randn({d, f}, rng, 0.3);
    p.b1 = Tensor::randn({f}, rng, 0.1);
    p.w2 = Tensor::randn({f, d}, rng, 0.3);
    p.b2 = Tensor::randn({d}, rng, 0.1);
    return p;
}

EncoderLayerParams rand_encoder_layer(RngStream& rng, std::size_t d, std::size_t f) {
    EncoderLayerParams e;
    e.attn = rand_attn(rng, d);
    e.ffn = rand_ffn(rng, d, f);
    e.ln1_g = Tensor::filled({d}, 1.0);
    e.ln1_b = Tensor::zeros({d});
    e.ln2_g = Tensor::filled({d}, 1.0);
    e.ln2_b = Tensor::zeros({d});
    return e;
}

DecoderLayerParams rand_decoder_layer(RngStream& rng, std::size_t d, std::size_t f) {
    DecoderLayerParams p;
    p.self_attn = rand_attn(rng, d);
    p.cross_attn = rand_attn(rng, d);
    p.ffn = rand_ffn(rng, d, f);
    p.ln1_g = Tensor::filled({d}, 1.0);
    p.ln1_b = Tensor::zeros({d});
    p.ln2_g = Tensor::filled({d}, 1.0);
    p.ln2_b = Tensor::zeros({d});
    p.ln3_g = Tensor::filled({d}, 1.0);
    p.ln3_b = Tensor::zeros({d});
    return p;
}

} // namespace

TEST_CASE("config rejects indivisible head split") {
    BlockConfig b = tiny_block();
    b.heads = 3;
    REQUIRE_THROWS_AS(b.validate(), ConfigError);
    b = tiny_block();
    REQUIRE(b.head_dim() == 2);
}

TEST_CASE("mask constructors carve the expected patterns") {
    AttentionMask pad = AttentionMask::padding(2, {1, 0, 1});
    REQUIRE(pad.q_len == 2);
    REQUIRE(pad.k_len == 3);
    REQUIRE_FALSE(pad.is_causal);
    for (std::size_t i = 0; i < 2; ++i) {
        REQUIRE(pad.at(i, 0));
        REQUIRE_FALSE(pad.at(i, 1));
        REQUIRE(pad.at(i, 2));
    }
    AttentionMask cz = AttentionMask::causal({1, 1, 1});
    REQUIRE(cz.is_causal);
    REQUIRE(cz.at(0, 0));
    REQUIRE_FALSE(cz.at(0, 1));
    REQUIRE(cz.at(2, 0));
    REQUIRE(cz.at(2, 2));
}

TEST_CASE("masked softmax zeroes masked keys exactly and normalizes the rest") {
    Tensor scores = Tensor::from_values({2, 3}, {1, 2, 3, 0.5, 0.5, 0.5});
    AttentionMask mask = AttentionMask::padding(2, {1, 0, 1});
    Tensor w = masked_softmax(scores, mask);
    REQUIRE(w.at(0, 1) == 0.0); // exact zero, not small
    REQUIRE(w.at(1, 1) == 0.0);
    REQUIRE_THAT(w.at(0, 0) + w.at(0, 2), WithinAbs(1.0, 1e-14));
    // over {1,3}: softmax = 1/(1+e^2), e^2/(1+e^2)
    const double e2 = std::exp(2.0);
    REQUIRE_THAT(w.at(0, 2), WithinAbs(e2 / (1.0 + e2), 1e-14));
    REQUIRE_THAT(w.at(1, 0), WithinAbs(0.5, 1e-14));
}

TEST_CASE("masked softmax gradient never leaks into masked entries") {
    Tensor scores = Tensor::from_values({1, 3}, {0.3, 9.0, -0.2}, true);
    AttentionMask mask = AttentionMask::padding(1, {1, 0, 1});
    Tensor w = masked_softmax(scores, mask);
    sum_all(mul(w, w)).backward();
    REQUIRE(scores.grad_at(1) == 0.0);
    REQUIRE(scores.grad_at(0) != 0.0);
}

TEST_CASE("a row with no allowed keys is an error") {
    Tensor scores = Tensor::zeros({2, 2});
    AttentionMask mask = AttentionMask::padding(2, {0, 0});
    REQUIRE_THROWS_AS(masked_softmax(scores, mask), MaskError);
    AttentionMask causal_pad = AttentionMask::causal({0, 1});
    REQUIRE_THROWS_AS(masked_softmax(scores, causal_pad), MaskError);
    AttentionMask wrong = AttentionMask::padding(3, {1, 1});
    REQUIRE_THROWS_AS(masked_softmax(scores, wrong), MaskError);
}

TEST_CASE("attention output is invariant to appended padding") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(31, "padinv");
    AttnParams p = rand_attn(rng, cfg.d);
    Tensor x = Tensor::randn({3, cfg.d}, rng, 0.8);
    FwdCtx eval;
    Tensor base = multi_head_attention(x, x, p, AttentionMask::padding(3, {1, 1, 1}), cfg);

    Tensor padded = concat_rows({x, Tensor::randn({2, cfg.d}, rng, 5.0)});
    Tensor with_pad =
        multi_head_attention(padded, padded, p, AttentionMask::padding(5, {1, 1, 1, 0, 0}), cfg);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < cfg.d; ++c)
            REQUIRE_THAT(with_pad.at(r, c), WithinAbs(base.at(r, c), 1e-12));
}

TEST_CASE("encoder stack without positions is permutation-equivariant") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(32, "perm");
    std::vector<EncoderLayerParams> layers{rand_encoder_layer(rng, cfg.d, cfg.ffn_dim)};
    Tensor x = Tensor::randn({4, cfg.d}, rng, 0.8);
    FwdCtx eval;
    AttentionMask full = AttentionMask::padding(4, {1, 1, 1, 1});
    Tensor y = encoder_stack(x, layers, full, cfg, eval);

    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor xp = index_select(x, perm);
    Tensor yp = encoder_stack(xp, layers, full, cfg, eval);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < cfg.d; ++c)
            REQUIRE_THAT(yp.at(r, c), WithinAbs(y.at(perm[r], c), 1e-10));
}

TEST_CASE("zero-layer encoder stack is the identity") {
    Tensor x = Tensor::from_values({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    FwdCtx eval;
    Tensor y = encoder_stack(x, {}, AttentionMask::padding(2, {1, 1}), tiny_block(), eval);
    REQUIRE(y.data == x.data); // not even a copy
}

TEST_CASE("decoder never looks ahead") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(33, "causal");
    std::vector<DecoderLayerParams> layers{rand_decoder_layer(rng, cfg.d, cfg.ffn_dim),
                                           rand_decoder_layer(rng, cfg.d, cfg.ffn_dim)};
    Tensor memory = Tensor::randn({3, cfg.d}, rng, 0.8);
    Tensor x = Tensor::randn({4, cfg.d}, rng, 0.8);
    FwdCtx eval;
    AttentionMask self_mask = AttentionMask::causal(BoolVec(4, 1));
    AttentionMask mem_mask = AttentionMask::padding(4, BoolVec(3, 1));
    Tensor base = decoder_stack(x, memory, layers, self_mask, mem_mask, cfg, eval);

    Tensor bumped = Tensor::from_values(x.shape, *x.data);
    for (std::size_t c = 0; c < cfg.d; ++c) bumped.at(2, c) += 10.0;
    Tensor out = decoder_stack(bumped, memory, layers, self_mask, mem_mask, cfg, eval);
    for (std::size_t r = 0; r < 2; ++r) // rows before the bump are untouched
        for (std::size_t c = 0; c < cfg.d; ++c) REQUIRE(out.at(r, c) == base.at(r, c));
    bool later_changed = false;
    for (std::size_t c = 0; c < cfg.d; ++c) later_changed = later_changed || out.at(3, c) != base.at(3, c);
    REQUIRE(later_changed);
}

TEST_CASE("decoder rejects a non-causal self mask") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(34, "reject");
    std::vector<DecoderLayerParams> layers{rand_decoder_layer(rng, cfg.d, cfg.ffn_dim)};
    Tensor memory = Tensor::randn({2, cfg.d}, rng, 1.0);
    Tensor x = Tensor::randn({2, cfg.d}, rng, 1.0);
    FwdCtx eval;
    AttentionMask bad = AttentionMask::padding(2, {1, 1}); // full visibility
    REQUIRE_THROWS_AS(
        decoder_stack(x, memory, layers, bad, AttentionMask::padding(2, {1, 1}), cfg, eval),
        MaskError);
}

TEST_CASE("gradcheck: multi-head attention") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(35, "gmha");
    AttnParams p = rand_attn(rng, cfg.d);
    Tensor x = Tensor::randn({3, cfg.d}, rng, 0.6);
    AttentionMask mask = AttentionMask::padding(3, {1, 1, 0});
    auto loss = [&](std::vector<Tensor>& in) {
        AttnParams q{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
        Tensor y = multi_head_attention(in[0], in[0], q, mask, cfg);
        return sum_all(mul(y, y));
    };
    auto res = testsupport::grad_check({x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}, loss);
    INFO(res.worst);
    REQUIRE(res.max_err < 1e-6);
}

TEST_CASE("gradcheck: one encoder layer end to end") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(36, "genc");
    EncoderLayerParams e = rand_encoder_layer(rng, cfg.d, cfg.ffn_dim);
    Tensor x = Tensor::randn({3, cfg.d}, rng, 0.6);
    AttentionMask mask = AttentionMask::padding(3, {1, 1, 1});
    FwdCtx eval;
    auto loss = [&](std::vector<Tensor>& in) {
        EncoderLayerParams layer = e; // weights fixed, differentiate x / ln params
        layer.ln1_g = in[1];
        layer.ln2_b = in[2];
        Tensor y = encoder_layer(in[0], layer, mask, cfg, eval);
        return sum_all(mul(y, y));
    };
    auto res = testsupport::grad_check({x, e.ln1_g, e.ln2_b}, loss);
    INFO(res.worst);
    REQUIRE(res.max_err < 1e-6);
}

TEST_CASE("gradcheck: decoder layer with memory") {
    BlockConfig cfg = tiny_block();
    RngStream rng = RngStream::derive(37, "gdec");
    DecoderLayerParams p = rand_decoder_layer(rng, cfg.d, cfg.ffn_dim);
    Tensor x = Tensor::randn({3, cfg.d}, rng, 0.6);
    Tensor memory = Tensor::randn({2, cfg.d}, rng, 0.6);
    AttentionMask self_mask = AttentionMask::causal(BoolVec(3, 1));
    AttentionMask mem_mask = AttentionMask::padding(3, BoolVec(2, 1));
    FwdCtx eval;
    auto loss = [&](std::vector<Tensor>& in) {
        Tensor y = decoder_layer(in[0], in[1], p, self_mask, mem_mask, cfg, eval);
        return sum_all(mul(y, y));
    };
    auto res = testsupport::grad_check({x, memory}, loss);
    INFO(res.worst);
    REQUIRE(res.max_err < 1e-6);
}

TEST_CASE("attention scores use the per-head scale") {
    // one head, d=1: attention over two identical keys must average values
    BlockConfig cfg;
    cfg.d = 1;
    cfg.heads = 1;
    cfg.ffn_dim = 2;
    cfg.dropout_rate = 0.0;
    AttnParams p;
    p.wq = Tensor::from_values({1, 1}, {1.0});
    p.bq = Tensor::zeros({1});
    p.wk = Tensor::from_values({1, 1}, {1.0});
    p.bk = Tensor::zeros({1});
    p.wv = Tensor::from_values({1, 1}, {1.0});
    p.bv = Tensor::zeros({1});
    p.wo = Tensor::from_values({1, 1}, {1.0});
    p.bo = Tensor::zeros({1});
    Tensor x = Tensor::from_values({2, 1}, {3.0, 3.0}); // identical rows
    Tensor y = multi_head_attention(x, x, p, AttentionMask::full(2, 2), cfg);
    REQUIRE_THAT(y.at(0, 0), WithinAbs(3.0, 1e-12));
    REQUIRE_THAT(y.at(1, 0), WithinAbs(3.0, 1e-12));
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "uvl/objectives.hpp"

using namespace uvl;

namespace {

constexpr double kLn2 = 0.693147180559945309417232121458;

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 32;
    c.d = 8;
    c.d_f = 4;
    c.n_max = 10;
    c.m_max = 8;
    c.text_layers = 1;
    c.video_layers = 1;
    c.cross_layers = 1;
    c.decoder_layers = 1;
    c.heads = 2;
    c.ffn_dim = 16;
    c.dropout = 0.0;
    c.frame_classes = 5;
    return c;
}

ClipTextPair make_pair(const std::string& vid, std::size_t clip, std::vector<int> body,
                       std::size_t m, std::uint64_t seed) {
    ClipTextPair p;
    p.video_id = vid;
    p.clip_index = clip;
    p.tokens = {1};
    p.tokens.insert(p.tokens.end(), body.begin(), body.end());
    p.tokens.push_back(2);
    p.text_real.assign(p.tokens.size(), 1);
    p.frames = Tensor::zeros({m, 4});
    RngStream rng = RngStream::derive(seed, "pair-frames");
    for (std::size_t i = 0; i < p.frames.numel(); ++i) p.frames.at(i) = rng.gaussian();
    p.video_real.assign(m, 1);
    return p;
}

void zero_all(UniVLModel& model) {
    for (auto& [name, t] : model.params.named())
        std::fill(t.data->begin(), t.data->end(), 0.0);
}

std::vector<MaskedPairView> corrupt_batch(const std::vector<const ClipTextPair*>& batch,
                                          const ModelConfig& cfg, double enhancedv_prob,
                                          std::uint64_t seed) {
    std::vector<MaskedPairView> masks;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        RngStream rng = RngStream::derive(seed, "corrupt", b);
        masks.push_back(corrupt_pair(batch[b]->tokens, batch[b]->text_real, batch[b]->frames,
                                     batch[b]->video_real, cfg, 0.15, enhancedv_prob, rng));
    }
    return masks;
}

std::vector<EncodingBundle> encode_corrupted(const UniVLModel& model,
                                             const std::vector<const ClipTextPair*>& batch,
                                             const std::vector<MaskedPairView>& masks) {
    std::vector<EncodingBundle> encs;
    for (std::size_t b = 0; b < batch.size(); ++b)
        encs.push_back(model.encode_pair(masks[b].text.corrupted, batch[b]->text_real,
                                         masks[b].frames.corrupted, batch[b]->video_real,
                                         FwdCtx{}));
    return encs;
}

} // namespace

TEST_CASE("positive sets link a clip to itself and its temporal neighbors") {
    const auto a0 = make_pair("A", 0, {7}, 2, 1), a1 = make_pair("A", 1, {7}, 2, 2),
               a2 = make_pair("A", 2, {7}, 2, 3), b0 = make_pair("B", 0, {7}, 2, 4),
               c5 = make_pair("C", 5, {7}, 2, 5);
    const auto p = PositivePairSet::build({&a0, &a1, &a2, &b0, &c5});
    CHECK(p.members[0] == std::vector<std::size_t>{0, 1});
    CHECK(p.members[1] == std::vector<std::size_t>{0, 1, 2});
    CHECK(p.members[2] == std::vector<std::size_t>{1, 2});
    CHECK(p.members[3] == std::vector<std::size_t>{3});
    CHECK(p.members[4] == std::vector<std::size_t>{4});
}

TEST_CASE("uniform scores reduce MIL-NCE to positive-set counting") {
    SECTION("two singleton videos give ln 2") {
        PositivePairSet p;
        p.members = {{0}, {1}};
        const Tensor loss = mil_nce_from_scores(Tensor::zeros({2, 2}), p);
        CHECK(loss.scalar() == Catch::Approx(kLn2).epsilon(1e-12));
    }
    SECTION("a three-positive anchor contributes ln(5/3)") {
        PositivePairSet p;
        p.members = {{0, 1}, {0, 1, 2}, {1, 2}, {3}, {4}};
        const Tensor loss = mil_nce_from_scores(Tensor::zeros({5, 5}), p);
        const double expect =
            (std::log(5.0 / 2.0) * 2 + std::log(5.0 / 3.0) + std::log(5.0) * 2) / 5.0;
        CHECK(loss.scalar() == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("joint loss matches the brute-force oracle on random instances") {
    for (std::size_t trial = 0; trial < 120; ++trial) {
        RngStream rng = RngStream::derive(101, "joint-oracle", trial);
        const std::size_t B = 2 + rng.uniform_index(5), d = 3 + rng.uniform_index(4);

        std::vector<ClipTextPair> owned;
        for (std::size_t i = 0; i < B; ++i) {
            // a couple of videos so adjacency actually occurs
            const std::string vid = rng.bernoulli(0.5) ? "A" : "B";
            owned.push_back(make_pair(vid, rng.uniform_index(3), {7}, 2, 1000 + trial * 8 + i));
        }
        std::vector<const ClipTextPair*> batch;
        for (const auto& p : owned) batch.push_back(&p);
        const auto positives = PositivePairSet::build(batch);

        Tensor t_hats = Tensor::zeros({B, d}), v_hats = Tensor::zeros({B, d});
        for (std::size_t i = 0; i < B * d; ++i) {
            t_hats.at(i) = rng.uniform(-2.0, 2.0);
            v_hats.at(i) = rng.uniform(-2.0, 2.0);
        }

        std::vector<std::vector<double>> S(B, std::vector<double>(B, 0.0));
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < B; ++j)
                for (std::size_t k = 0; k < d; ++k) S[i][j] += v_hats.at(i, k) * t_hats.at(j, k);

        const double got = loss_joint(t_hats, v_hats, positives).scalar();
        const double want = oracle::mil_nce(S, positives.members);
        REQUIRE(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("joint loss is invariant under batch permutation") {
    RngStream rng = RngStream::derive(103, "perm");
    const std::size_t B = 5, d = 6;
    const auto a0 = make_pair("A", 0, {7}, 2, 11), a1 = make_pair("A", 1, {7}, 2, 12),
               a2 = make_pair("A", 2, {7}, 2, 13), b0 = make_pair("B", 0, {7}, 2, 14),
               b1 = make_pair("B", 1, {7}, 2, 15);
    const std::vector<const ClipTextPair*> batch{&a0, &a1, &a2, &b0, &b1};
    Tensor t = Tensor::zeros({B, d}), v = Tensor::zeros({B, d});
    for (std::size_t i = 0; i < B * d; ++i) {
        t.at(i) = rng.gaussian();
        v.at(i) = rng.gaussian();
    }
    const double base = loss_joint(t, v, PositivePairSet::build(batch)).scalar();

    const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
    std::vector<const ClipTextPair*> shuffled;
    for (std::size_t i : perm) shuffled.push_back(batch[i]);
    const double permuted =
        loss_joint(index_select(t, perm), index_select(v, perm),
                   PositivePairSet::build(shuffled)).scalar();
    CHECK(std::abs(base - permuted) < 1e-12);
}

TEST_CASE("joint loss requires a real batch") {
    PositivePairSet p;
    p.members = {{0}};
    CHECK_THROWS_AS(mil_nce_from_scores(Tensor::zeros({1, 1}), p), DataError);
}

TEST_CASE("NCE losses strictly decrease as the true logit grows") {
    double prev_row = 1e300, prev_mil = 1e300;
    PositivePairSet p;
    p.members = {{0}, {1}, {2}};
    for (double bump : {0.0, 1.0, 2.0}) {
        Tensor row = Tensor::from_values({1, 4}, {bump, 0.3, -0.2, 0.9});
        const double ce = nce_row_loss(row, 0).scalar();
        CHECK(ce < prev_row);
        prev_row = ce;

        Tensor S = Tensor::zeros({3, 3});
        S.at(0, 0) = bump;
        const double mil = mil_nce_from_scores(S, p).scalar();
        CHECK(mil < prev_mil);
        prev_mil = mil;
    }
}

TEST_CASE("NCE row loss matches the naive softmax oracle") {
    for (std::size_t trial = 0; trial < 120; ++trial) {
        RngStream rng = RngStream::derive(107, "nce-oracle", trial);
        const std::size_t K = 2 + rng.uniform_index(9);
        std::vector<double> logits(K);
        for (double& l : logits) l = rng.uniform(-4.0, 4.0);
        const std::size_t target = rng.uniform_index(K);
        Tensor row = Tensor::from_values({1, K}, logits);
        REQUIRE(std::abs(nce_row_loss(row, target).scalar() -
                         oracle::softmax_ce(logits, target)) < 1e-10);
    }
}

TEST_CASE("a zeroed model produces the exact counting losses end to end") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 5);
    zero_all(model);

    const auto p0 = make_pair("A", 0, {8, 9, 10}, 3, 21);
    const auto p1 = make_pair("B", 0, {11, 12}, 2, 22);
    const std::vector<const ClipTextPair*> batch{&p0, &p1};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 77);

    std::vector<ClipTextPair> corpus_pairs{p0, p1};
    const auto clips = VideoClipIndex::build(corpus_pairs);
    PretrainConfig pcfg;
    RngStream rng = RngStream::derive(5, "losses");
    const FwdCtx ctx;

    const LossBundle bundle = pretrain_losses(model, batch, masks, clips, pcfg, rng, ctx);
    const double lnV = std::log(32.0);
    CHECK(bundle.joint.scalar() == Catch::Approx(kLn2).epsilon(1e-12));
    CHECK(bundle.cmlm.scalar() == Catch::Approx(lnV).epsilon(1e-12));
    // pool = 3 + 2 real frames, uniform logits
    CHECK(bundle.cmfm.scalar() == Catch::Approx(std::log(5.0)).epsilon(1e-12));
    // 1 positive + 1 batch negative, no same-video clips to resample
    CHECK(bundle.align.scalar() == Catch::Approx(kLn2).epsilon(1e-12));
    CHECK(bundle.decoder.scalar() == Catch::Approx(lnV).epsilon(1e-12));
    const double sum = bundle.joint.scalar() + bundle.cmlm.scalar() + bundle.cmfm.scalar() +
                       bundle.align.scalar() + bundle.decoder.scalar();
    CHECK(bundle.total.scalar() == Catch::Approx(sum).epsilon(1e-12));
}

TEST_CASE("combine applies weights exactly and flags NaN by name") {
    LossWeights w;
    w.joint = 2.0;
    w.cmlm = 0.5;
    w.cmfm = 0.0;
    w.align = 1.0;
    w.decoder = 3.0;
    const LossBundle b = combine(Tensor::scalar_of(1.0), Tensor::scalar_of(2.0),
                                 Tensor::scalar_of(3.0), Tensor::scalar_of(4.0),
                                 Tensor::scalar_of(5.0), w);
    CHECK(b.total.scalar() == 2.0 * 1.0 + 0.5 * 2.0 + 0.0 + 4.0 + 3.0 * 5.0);

    LossWeights zero;
    zero.joint = zero.cmlm = zero.cmfm = zero.align = zero.decoder = 0.0;
    CHECK(combine(Tensor::scalar_of(1.0), Tensor::scalar_of(1.0), Tensor::scalar_of(1.0),
                  Tensor::scalar_of(1.0), Tensor::scalar_of(1.0), zero)
              .total.scalar() == 0.0);

    const double nan = std::nan("");
    CHECK_THROWS_WITH(combine(Tensor::scalar_of(0.0), Tensor::scalar_of(0.0),
                              Tensor::scalar_of(nan), Tensor::scalar_of(0.0),
                              Tensor::scalar_of(0.0)),
                      Catch::Matchers::ContainsSubstring("cmfm"));
}

TEST_CASE("video-only masked pairs contribute exactly zero CMLM and a finite decoder loss") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 9);

    const auto p0 = make_pair("A", 0, {8, 9, 10}, 3, 31);
    const auto p1 = make_pair("B", 0, {11, 12, 13}, 3, 32);
    const std::vector<const ClipTextPair*> batch{&p0, &p1};
    const auto masks = corrupt_batch(batch, cfg, 1.0, 78); // every pair flagged
    REQUIRE(masks[0].enhancedv);
    REQUIRE(masks[1].enhancedv);

    std::vector<ClipTextPair> corpus_pairs{p0, p1};
    const auto clips = VideoClipIndex::build(corpus_pairs);
    RngStream rng = RngStream::derive(9, "losses");
    const LossBundle bundle =
        pretrain_losses(model, batch, masks, clips, PretrainConfig{}, rng, FwdCtx{});

    CHECK(bundle.cmlm.scalar() == 0.0);
    bool noticed = false;
    for (const auto& n : bundle.notices) noticed = noticed || n.find("cmlm") != std::string::npos;
    CHECK(noticed);
    CHECK(std::isfinite(bundle.decoder.scalar()));
    CHECK(bundle.decoder.scalar() > 0.0);
}

TEST_CASE("CMFM pool subsampling keeps every anchor's target reachable") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 13);
    zero_all(model);

    const auto p0 = make_pair("A", 0, {8, 9}, 8, 41);
    const auto p1 = make_pair("B", 0, {10, 11}, 8, 42);
    const std::vector<const ClipTextPair*> batch{&p0, &p1};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 79);

    std::vector<ClipTextPair> corpus_pairs{p0, p1};
    const auto clips = VideoClipIndex::build(corpus_pairs);
    PretrainConfig pcfg;
    pcfg.cmfm_pool_cap = 4; // 16 real frames get cut down
    RngStream rng = RngStream::derive(13, "losses");
    const LossBundle bundle = pretrain_losses(model, batch, masks, clips, pcfg, rng, FwdCtx{});

    // uniform logits: ln 4 when the anchor survived the cut, ln 5 when appended
    CHECK(bundle.cmfm.scalar() >= std::log(4.0) - 1e-9);
    CHECK(bundle.cmfm.scalar() <= std::log(5.0) + 1e-9);
}

TEST_CASE("CMFM with a single real frame has no negatives") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 15);
    const auto p0 = make_pair("A", 0, {8}, 1, 51);
    const std::vector<const ClipTextPair*> batch{&p0};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 80);
    const auto encs = encode_corrupted(model, batch, masks);
    RngStream rng = RngStream::derive(15, "losses");
    CHECK_THROWS_AS(loss_cmfm(model, encs, batch, masks, 512, rng), DataError);
}

TEST_CASE("alignment resamples a clip of the same video as an extra negative") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 17);
    zero_all(model);

    std::vector<ClipTextPair> corpus_pairs{make_pair("A", 0, {8, 9}, 3, 61),
                                           make_pair("A", 1, {10, 11}, 3, 62)};
    const auto clips = VideoClipIndex::build(corpus_pairs);

    const std::vector<const ClipTextPair*> batch{&corpus_pairs[0]};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 81);
    const auto encs = encode_corrupted(model, batch, masks);
    RngStream rng = RngStream::derive(17, "losses");
    const Tensor align = loss_align(model, encs, batch, masks, clips, 3, 0.15, rng, FwdCtx{});
    // 1 positive + 0 batch negatives + 1 resampled same-video clip, uniform
    CHECK(align.scalar() == Catch::Approx(kLn2).epsilon(1e-12));

    // a single-clip video with no batch peers has nothing to contrast against
    std::vector<ClipTextPair> lone{make_pair("B", 0, {8, 9}, 3, 63)};
    const auto lone_clips = VideoClipIndex::build(lone);
    const std::vector<const ClipTextPair*> lone_batch{&lone[0]};
    const auto lone_masks = corrupt_batch(lone_batch, cfg, 0.0, 82);
    const auto lone_encs = encode_corrupted(model, lone_batch, lone_masks);
    RngStream rng2 = RngStream::derive(17, "losses", 2);
    CHECK_THROWS_WITH(loss_align(model, lone_encs, lone_batch, lone_masks, lone_clips, 3, 0.15,
                                 rng2, FwdCtx{}),
                      Catch::Matchers::ContainsSubstring("no negative clips"));
}

TEST_CASE("decoder loss needs a non-empty transcript") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 19);
    ClipTextPair empty = make_pair("A", 0, {8}, 2, 71);
    empty.tokens = {cfg.cls_id, cfg.sep_id};
    empty.text_real.assign(2, 1);

    const auto full = make_pair("B", 0, {8, 9}, 2, 72);
    const std::vector<const ClipTextPair*> batch{&empty, &full};
    // masking needs maskable tokens; corrupt only the full pair and reuse for both
    std::vector<MaskedPairView> masks;
    {
        RngStream rng = RngStream::derive(19, "corrupt", 0);
        MaskedPairView v;
        v.text.corrupted = empty.tokens;
        v.text.targets.assign(2, kIgnoreTarget);
        v.frames = mask_frames(empty.frames, empty.video_real, 0.15, rng);
        masks.push_back(v);
        RngStream rng2 = RngStream::derive(19, "corrupt", 1);
        masks.push_back(corrupt_pair(full.tokens, full.text_real, full.frames, full.video_real,
                                     cfg, 0.15, 0.0, rng2));
    }
    const auto encs = encode_corrupted(model, batch, masks);
    CHECK_THROWS_WITH(loss_decoder(model, encs, batch, FwdCtx{}),
                      Catch::Matchers::ContainsSubstring("empty transcript"));
}

TEST_CASE("ablated objectives are still logged but drop out of the total") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 23);
    const auto p0 = make_pair("A", 0, {8, 9}, 3, 91);
    const auto p1 = make_pair("B", 0, {10, 11}, 3, 92);
    const std::vector<const ClipTextPair*> batch{&p0, &p1};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 83);
    std::vector<ClipTextPair> corpus_pairs{p0, p1};
    const auto clips = VideoClipIndex::build(corpus_pairs);

    PretrainConfig pcfg;
    pcfg.use_cmfm = false;
    pcfg.use_decoder = false;
    RngStream rng = RngStream::derive(23, "losses");
    const LossBundle bundle = pretrain_losses(model, batch, masks, clips, pcfg, rng, FwdCtx{});
    // ablated components keep their real values for the ledger
    CHECK(bundle.cmfm.scalar() > 0.0);
    CHECK(bundle.decoder.scalar() > 0.0);
    CHECK(bundle.weights.cmfm == 0.0);
    CHECK(bundle.weights.decoder == 0.0);
    CHECK(bundle.joint.scalar() > 0.0);
    const double sum = bundle.joint.scalar() + bundle.cmlm.scalar() + bundle.align.scalar();
    CHECK(bundle.total.scalar() == Catch::Approx(sum).epsilon(1e-12));
    std::size_t noted = 0;
    for (const auto& n : bundle.notices)
        if (n.find("ablated") != std::string::npos) ++noted;
    CHECK(noted == 2);

    // turning a component off must not shift the RNG draws of the others
    PretrainConfig all_on;
    RngStream r1 = RngStream::derive(23, "losses", 7);
    const LossBundle full = pretrain_losses(model, batch, masks, clips, all_on, r1, FwdCtx{});
    PretrainConfig no_align;
    no_align.use_align = false;
    RngStream r2 = RngStream::derive(23, "losses", 7);
    const LossBundle cut = pretrain_losses(model, batch, masks, clips, no_align, r2, FwdCtx{});
    CHECK(cut.align.scalar() == full.align.scalar());
    CHECK(cut.cmfm.scalar() == full.cmfm.scalar());
    CHECK(cut.total.scalar() < full.total.scalar());
}

TEST_CASE("the combined loss gradient survives a finite-difference check") {
    const ModelConfig cfg = tiny_config();
    UniVLModel model = UniVLModel::init(cfg, 29);

    const auto p0 = make_pair("A", 0, {8, 9, 10}, 3, 95);
    const auto p1 = make_pair("A", 1, {11, 12}, 2, 96);
    const auto p2 = make_pair("B", 0, {13, 14}, 3, 97);
    const std::vector<const ClipTextPair*> batch{&p0, &p1, &p2};
    const auto masks = corrupt_batch(batch, cfg, 0.0, 84);
    std::vector<ClipTextPair> corpus_pairs{p0, p1, p2};
    const auto clips = VideoClipIndex::build(corpus_pairs);
    const PretrainConfig pcfg;

    // handles share storage with the model, so nudging them perturbs the loss;
    // grads must exist on the members before copies are taken or the shared
    // buffer would diverge
    model.params.set_all_requires_grad(true);
    auto named = model.params.named();
    std::vector<Tensor> probes;
    for (const auto& [name, t] : named)
        if (name == "cmfm.w" || name == "align.w1" || name == "mlm.b" ||
            name == "cross.0.attn.wq" || name == "dec_head.b" || name == "segment.video")
            probes.push_back(t);
    REQUIRE(probes.size() == 6);

    auto loss_fn = [&](std::vector<Tensor>&) {
        RngStream rng = RngStream::derive(29, "gc");
        return pretrain_losses(model, batch, masks, clips, pcfg, rng, FwdCtx{}).total;
    };
    const auto res = testsupport::grad_check(probes, loss_fn, 1e-5);
    INFO(res.worst);
    CHECK(res.max_err < 1e-5);
}

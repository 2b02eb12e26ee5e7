#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "uvl/metrics.hpp"
#include "uvl/rng.hpp"

using namespace uvl;

namespace {

std::vector<int> random_sentence(RngStream& rng, std::size_t min_len, std::size_t max_len,
                                 int vocab) {
    const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
    std::vector<int> s(len);
    for (auto& t : s) t = static_cast<int>(rng.uniform_index(vocab));
    return s;
}

} // namespace

TEST_CASE("perfect candidates score BLEU 1 and ROUGE-L 1") {
    const std::vector<TokenSeq> sents{{7, 8, 9, 10, 11}, {12, 13, 14, 15}};
    CHECK(bleu(sents, sents, 4) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(bleu(sents, sents, 3) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(rouge_l(sents, sents) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("an empty candidate zeroes BLEU") {
    CHECK(bleu({{}}, {{7, 8, 9, 10}}, 4) == 0.0);
    // one empty candidate among healthy ones only drags the pooled counts
    const double partial = bleu({{7, 8, 9, 10}, {}}, {{7, 8, 9, 10}, {5, 6, 7, 8}}, 4);
    CHECK(partial > 0.0);
    CHECK(partial < 1.0);
}

TEST_CASE("BLEU matches the n-gram counts worked out by hand") {
    // cand1 = a b c e d vs ref1 = a b c e; cand2 = ref2 = a b
    //   1-grams: (a,b,c,e matched; d not) 4/5 + 2/2            -> 6/7
    //   2-grams: (ab,bc,ce matched; ed not) 3/4 + 1/1          -> 4/5
    //   3-grams: (abc,bce matched; ced not) 2/3 + 0/0          -> 2/3
    //   4-grams: (abce matched; bced not)   1/2 + 0/0          -> 1/2
    //   candidate length 7 >= reference length 6 -> brevity penalty 1
    const int a = 7, b = 8, c = 9, d = 10, e = 11;
    const std::vector<TokenSeq> cands{{a, b, c, e, d}, {a, b}};
    const std::vector<TokenSeq> refs{{a, b, c, e}, {a, b}};
    const double b4 = 6.0 / 7 * 4.0 / 5 * 2.0 / 3 * 1.0 / 2;  // = 8/35
    const double b3 = 6.0 / 7 * 4.0 / 5 * 2.0 / 3;            // = 16/35
    CHECK(bleu(cands, refs, 4) == Catch::Approx(std::pow(b4, 0.25)).epsilon(1e-12));
    CHECK(bleu(cands, refs, 3) == Catch::Approx(std::pow(b3, 1.0 / 3)).epsilon(1e-12));
}

TEST_CASE("the brevity penalty kicks in exactly when candidates run short") {
    // cand = a b (len 2) vs ref = a b c d (len 4): both precisions are 1,
    // so BLEU-2 = exp(1 - 4/2) = 1/e
    const std::vector<TokenSeq> cands{{7, 8}};
    const std::vector<TokenSeq> refs{{7, 8, 9, 10}};
    CHECK(bleu(cands, refs, 2) == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("BLEU and ROUGE reject malformed corpora") {
    CHECK_THROWS_AS(bleu({{1}}, {{1}, {2}}, 4), DataError);
    CHECK_THROWS_AS(bleu({}, {}, 4), DataError);
    CHECK_THROWS_AS(bleu({{1}}, {{}}, 4), DataError);
    CHECK_THROWS_AS(bleu({{1}}, {{1}}, 0), ConfigError);
    CHECK_THROWS_AS(rouge_l({{1}}, {{1}, {2}}), DataError);
    CHECK_THROWS_AS(rouge_l({}, {}), DataError);
    CHECK_THROWS_AS(rouge_l_f1({1}, {}), DataError);
}

TEST_CASE("BLEU agrees with the type-clipping oracle on random corpora") {
    RngStream rng = RngStream::derive(101, "bleu");
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t pairs = 1 + rng.uniform_index(4);
        std::vector<TokenSeq> cands, refs;
        for (std::size_t i = 0; i < pairs; ++i) {
            cands.push_back(random_sentence(rng, 0, 12, 5));
            refs.push_back(random_sentence(rng, 1, 12, 5));
        }
        const std::size_t order = 1 + rng.uniform_index(4);
        const double got = bleu(cands, refs, order);
        const double want = oracle::bleu(cands, refs, order);
        CAPTURE(trial, order);
        CHECK(got == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("ROUGE-L matches hand arithmetic and the memoized-LCS oracle") {
    // cand = a b c d vs ref = a c b d: LCS length 3 -> P = R = F1 = 3/4
    CHECK(rouge_l_f1({7, 8, 9, 10}, {7, 9, 8, 10}) == Catch::Approx(0.75).epsilon(1e-12));
    CHECK(rouge_l_f1({1, 2, 3}, {4, 5, 6}) == 0.0);
    CHECK(rouge_l_f1({}, {1, 2}) == 0.0);

    // sentence averaging: a perfect and a disjoint pair
    CHECK(rouge_l({{1, 2}, {3, 4}}, {{1, 2}, {5, 6}}) == Catch::Approx(0.5).epsilon(1e-12));

    RngStream rng = RngStream::derive(102, "rouge");
    for (int trial = 0; trial < 120; ++trial) {
        const auto cand = random_sentence(rng, 0, 14, 4);
        const auto ref = random_sentence(rng, 1, 14, 4);
        CAPTURE(trial);
        CHECK(rouge_l_f1(cand, ref) ==
              Catch::Approx(oracle::rouge_l_f1(cand, ref)).margin(1e-12));
    }
}

TEST_CASE("ranks break ties by candidate index") {
    // truth index 2 scores 0.9; index 0 also scores 0.9 and wins the tie
    const std::vector<std::vector<double>> scores{{0.9, 0.8, 0.9}};
    const auto ranks = ranks_of_truth(scores, {2});
    REQUIRE(ranks.size() == 1);
    CHECK(ranks[0] == 2);
    // the same scores with truth at index 0: nothing beats it
    CHECK(ranks_of_truth(scores, {0})[0] == 1);
}

TEST_CASE("ranks match the sort-based oracle exactly on random matrices") {
    RngStream rng = RngStream::derive(103, "ranks");
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t q = 1 + rng.uniform_index(20);
        const std::size_t c = 1 + rng.uniform_index(50);
        std::vector<std::vector<double>> scores(q, std::vector<double>(c));
        std::vector<std::size_t> truth(q);
        for (std::size_t i = 0; i < q; ++i) {
            // coarse grid of values makes ties common
            for (auto& x : scores[i]) x = static_cast<double>(rng.uniform_index(6)) / 5.0;
            truth[i] = rng.uniform_index(c);
        }
        const auto ranks = ranks_of_truth(scores, truth);
        for (std::size_t i = 0; i < q; ++i) {
            CAPTURE(trial, i);
            CHECK(ranks[i] == oracle::rank_by_sort(scores[i], truth[i]));
        }
        // recall monotonicity holds on every evaluation
        const double r1 = recall_at(ranks, 1), r5 = recall_at(ranks, 5),
                     r10 = recall_at(ranks, 10);
        CHECK(r1 <= r5);
        CHECK(r5 <= r10);
    }
}

TEST_CASE("median rank averages the middle pair on even counts") {
    CHECK(median_rank({3}) == 3.0);
    CHECK(median_rank({1, 3}) == 2.0);
    CHECK(median_rank({5, 1, 3}) == 3.0);
    CHECK(median_rank({4, 1, 2, 8}) == 3.0);
    CHECK_THROWS_AS(median_rank({}), DataError);
}

TEST_CASE("rank computation rejects malformed inputs") {
    CHECK_THROWS_AS(ranks_of_truth({}, {}), DataError);
    CHECK_THROWS_AS(ranks_of_truth({{1.0}}, {0, 1}), DataError);
    CHECK_THROWS_AS(ranks_of_truth({{1.0}}, {3}), DataError);
    CHECK_THROWS_AS(ranks_of_truth({{}}, {0}), DataError);
    CHECK_THROWS_AS(recall_at({}, 1), DataError);
}

TEST_CASE("MAE and Pearson match hand arithmetic") {
    CHECK(mean_absolute_error({1.0, 2.0}, {1.5, 1.0}) == Catch::Approx(0.75).epsilon(1e-12));
    // devs: preds {-2,-1,0,1,2}, labels {-2,0,-1,2,1}; cov*n = 8, var*n = 10 each
    const std::vector<double> p{1, 2, 3, 4, 5}, l{1, 3, 2, 5, 4};
    CHECK(pearson(p, l) == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(pearson(p, p) == Catch::Approx(1.0).epsilon(1e-12));
    std::vector<double> neg;
    for (double x : p) neg.push_back(-x);
    CHECK(pearson(p, neg) == Catch::Approx(-1.0).epsilon(1e-12));
    CHECK_THROWS_AS(pearson({1.0, 1.0}, {1.0, 2.0}), NumericError);
    CHECK_THROWS_AS(pearson({1.0}, {1.0}), DataError);
    CHECK_THROWS_AS(mean_absolute_error({}, {}), DataError);
}

TEST_CASE("sentiment metrics binarize by sign and skip zero labels") {
    const std::vector<double> labels{2.0, -1.0, 0.0, 3.0};
    const std::vector<double> perfect = labels;
    const auto m = sentiment_metrics(perfect, labels);
    CHECK(m.mae == 0.0);
    CHECK(m.corr_defined);
    CHECK(m.corr == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(m.binarized == 3);  // the exact-zero label is excluded
    CHECK(m.ba == 1.0);
    CHECK(m.f1 == 1.0);

    // one sign error: pred -0.5 against label +3
    const auto worse = sentiment_metrics({2.0, -1.0, 0.0, -0.5}, labels);
    CHECK(worse.ba == Catch::Approx(2.0 / 3).epsilon(1e-12));
    // tp=1 fp=0 fn=1 -> F1 = 2/3
    CHECK(worse.f1 == Catch::Approx(2.0 / 3).epsilon(1e-12));

    const auto flat = sentiment_metrics({1.0, 1.0, 1.0, 1.0}, labels);
    CHECK_FALSE(flat.corr_defined);
    CHECK(std::isnan(flat.corr));
    REQUIRE_FALSE(flat.notices.empty());
    CHECK_THAT(flat.notices[0], Catch::Matchers::ContainsSubstring("constant"));

    const auto neutral = sentiment_metrics({1.0, -1.0}, {0.0, 0.0});
    CHECK(neutral.binarized == 0);
    CHECK_THAT(neutral.notices.back(), Catch::Matchers::ContainsSubstring("zero"));
}

TEST_CASE("frame accuracy counts real frames only") {
    CHECK(frame_accuracy({1, 2, 3}, {1, 2, 3}, {1, 1, 1}) == 1.0);
    CHECK(frame_accuracy({1, 2}, {2, 1}, {1, 1}) == 0.0);
    // the padded tail disagrees but does not count
    CHECK(frame_accuracy({1, 2, 9}, {1, 2, 3}, {1, 1, 0}) == 1.0);
    CHECK(frame_accuracy({1, 2, 3, 4}, {1, 0, 3, 0}, {1, 1, 1, 1}) == 0.5);
    CHECK_THROWS_AS(frame_accuracy({1}, {1}, {0}), DataError);
    CHECK_THROWS_AS(frame_accuracy({1}, {1, 2}, {1, 1}), DataError);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "uvl/error.hpp"
#include "uvl/ops.hpp"

namespace uvl {

using TokenSeq = std::vector<int>;

namespace detail {

/// Clipped n-gram matches: how many candidate n-grams also occur in the
/// reference, counting each reference n-gram at most as often as it appears.
inline std::size_t clipped_ngram_matches(const TokenSeq& cand, const TokenSeq& ref,
                                         std::size_t n) {
    if (cand.size() < n || ref.size() < n) return 0;
    std::map<std::vector<int>, std::size_t> budget;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
        budget[std::vector<int>(ref.begin() + i, ref.begin() + i + n)] += 1;
    std::size_t matches = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
        auto it = budget.find(std::vector<int>(cand.begin() + i, cand.begin() + i + n));
        if (it != budget.end() && it->second > 0) {
            it->second -= 1;
            matches += 1;
        }
    }
    return matches;
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace detail

/// Corpus BLEU-N with brevity penalty: geometric mean of corpus-pooled
/// clipped n-gram precisions for orders 1..max_n (uniform weights), scaled by
/// exp(1 - r/c) when the candidates run short. No smoothing — a zero
/// precision at any order zeroes the score.
inline double bleu(const std::vector<TokenSeq>& candidates,
                   const std::vector<TokenSeq>& references, std::size_t max_n) {
    if (max_n == 0) throw ConfigError("bleu: max_n must be positive");
    if (candidates.size() != references.size())
        throw DataError("bleu: " + std::to_string(candidates.size()) + " candidates for " +
                        std::to_string(references.size()) + " references");
    if (candidates.empty()) throw DataError("bleu: no sentence pairs");
    for (const auto& ref : references)
        if (ref.empty()) throw DataError("bleu: empty reference");

    std::size_t cand_len = 0, ref_len = 0;
    for (const auto& c : candidates) cand_len += c.size();
    for (const auto& r : references) ref_len += r.size();
    if (cand_len == 0) return 0.0;

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        std::size_t matches = 0, total = 0;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            matches += detail::clipped_ngram_matches(candidates[i], references[i], n);
            if (candidates[i].size() >= n) total += candidates[i].size() - n + 1;
        }
        if (matches == 0 || total == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matches) / static_cast<double>(total));
    }
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

/// ROUGE-L F1 for one sentence pair: LCS-based precision and recall with
/// equal weight. Empty candidate or no common subsequence gives 0.
inline double rouge_l_f1(const TokenSeq& candidate, const TokenSeq& reference) {
    if (reference.empty()) throw DataError("rouge_l: empty reference");
    const double lcs = static_cast<double>(detail::lcs_length(candidate, reference));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

/// Sentence-averaged ROUGE-L F1 over a corpus.
inline double rouge_l(const std::vector<TokenSeq>& candidates,
                      const std::vector<TokenSeq>& references) {
    if (candidates.size() != references.size())
        throw DataError("rouge_l: " + std::to_string(candidates.size()) + " candidates for " +
                        std::to_string(references.size()) + " references");
    if (candidates.empty()) throw DataError("rouge_l: no sentence pairs");
    double sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        sum += rouge_l_f1(candidates[i], references[i]);
    return sum / static_cast<double>(candidates.size());
}

/// Rank of the true candidate for each query row: 1 + the number of
/// candidates that beat it. Ties break by candidate index, so equal-scoring
/// candidates with a smaller index count as wins — fully deterministic.
inline std::vector<std::size_t> ranks_of_truth(const std::vector<std::vector<double>>& scores,
                                               const std::vector<std::size_t>& truth) {
    if (scores.size() != truth.size())
        throw DataError("ranks_of_truth: " + std::to_string(truth.size()) +
                        " truth indices for " + std::to_string(scores.size()) + " queries");
    if (scores.empty()) throw DataError("ranks_of_truth: no queries");
    std::vector<std::size_t> ranks;
    ranks.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& row = scores[i];
        if (row.empty()) throw DataError("ranks_of_truth: query " + std::to_string(i) +
                                         " has no candidates");
        const std::size_t g = truth[i];
        if (g >= row.size())
            throw DataError("ranks_of_truth: truth index " + std::to_string(g) +
                            " out of range for query " + std::to_string(i));
        std::size_t beaten_by = 0;
        for (std::size_t j = 0; j < row.size(); ++j)
            if (row[j] > row[g] || (row[j] == row[g] && j < g)) ++beaten_by;
        ranks.push_back(1 + beaten_by);
    }
    return ranks;
}

/// Fraction of queries whose true candidate ranks within the top k.
inline double recall_at(const std::vector<std::size_t>& ranks, std::size_t k) {
    if (ranks.empty()) throw DataError("recall_at: no ranks");
    std::size_t hits = 0;
    for (std::size_t r : ranks) hits += r <= k ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// Median rank; the even case averages the two middle values.
inline double median_rank(const std::vector<std::size_t>& ranks) {
    if (ranks.empty()) throw DataError("median_rank: no ranks");
    std::vector<std::size_t> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    if (n % 2 == 1) return static_cast<double>(sorted[n / 2]);
    return (static_cast<double>(sorted[n / 2 - 1]) + static_cast<double>(sorted[n / 2])) / 2.0;
}

inline double mean_absolute_error(const std::vector<double>& preds,
                                  const std::vector<double>& labels) {
    if (preds.size() != labels.size() || preds.empty())
        throw DataError("mean_absolute_error: needs matching non-empty prediction and "
                        "label lists");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) sum += std::abs(preds[i] - labels[i]);
    return sum / static_cast<double>(preds.size());
}

/// Pearson correlation. A constant side has no direction to correlate with,
/// so zero variance is an error the caller turns into a reported notice.
inline double pearson(const std::vector<double>& preds, const std::vector<double>& labels) {
    if (preds.size() != labels.size() || preds.size() < 2)
        throw DataError("pearson: needs at least 2 matching points");
    const double n = static_cast<double>(preds.size());
    double mp = 0.0, ml = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        mp += preds[i];
        ml += labels[i];
    }
    mp /= n;
    ml /= n;
    double cov = 0.0, vp = 0.0, vl = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double dp = preds[i] - mp, dl = labels[i] - ml;
        cov += dp * dl;
        vp += dp * dp;
        vl += dl * dl;
    }
    if (vp == 0.0 || vl == 0.0)
        throw NumericError("pearson: correlation is undefined for constant inputs");
    return cov / std::sqrt(vp * vl);
}

/// Sign-based binary classification metrics over non-zero labels, plus the
/// regression metrics. The common protocol for scores in [-3, 3]: exact-zero
/// labels are neutral and excluded from BA/F1; the positive class is
/// sentiment > 0.
struct SentimentMetrics {
    double mae = 0.0;
    double corr = 0.0;
    bool corr_defined = false;
    double ba = 0.0;
    double f1 = 0.0;
    std::size_t binarized = 0;  // pairs surviving the zero-label exclusion
    std::vector<std::string> notices;
};

inline SentimentMetrics sentiment_metrics(const std::vector<double>& preds,
                                          const std::vector<double>& labels) {
    SentimentMetrics out;
    out.mae = mean_absolute_error(preds, labels);
    try {
        out.corr = pearson(preds, labels);
        out.corr_defined = true;
    } catch (const NumericError& e) {
        out.corr = std::numeric_limits<double>::quiet_NaN();
        out.notices.push_back(std::string("corr: ") + e.what());
    }

    std::size_t tp = 0, fp = 0, fn = 0, correct = 0, total = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] == 0.0) continue;  // neutral labels carry no sign
        ++total;
        const bool pred_pos = preds[i] > 0.0, label_pos = labels[i] > 0.0;
        if (pred_pos == label_pos) ++correct;
        if (pred_pos && label_pos) ++tp;
        if (pred_pos && !label_pos) ++fp;
        if (!pred_pos && label_pos) ++fn;
    }
    out.binarized = total;
    if (total == 0) {
        out.notices.push_back("ba/f1: every label is exactly zero, nothing to binarize");
        return out;
    }
    out.ba = static_cast<double>(correct) / static_cast<double>(total);
    out.f1 = tp == 0 ? 0.0
                     : 2.0 * static_cast<double>(tp) /
                           static_cast<double>(2 * tp + fp + fn);
    return out;
}

/// Frame-wise accuracy over real frames only.
inline double frame_accuracy(const std::vector<int>& predicted, const std::vector<int>& truth,
                             const BoolVec& real) {
    if (predicted.size() != truth.size() || predicted.size() != real.size())
        throw DataError("frame_accuracy: prediction, truth, and mask lengths disagree");
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (!real[i]) continue;
        ++total;
        if (predicted[i] == truth[i]) ++correct;
    }
    if (total == 0) throw DataError("frame_accuracy: no real frames to score");
    return static_cast<double>(correct) / static_cast<double>(total);
}

} // namespace uvl

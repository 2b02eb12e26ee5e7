#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uvl/adam.hpp"
#include "uvl/corpus.hpp"
#include "uvl/metrics.hpp"
#include "uvl/model.hpp"
#include "uvl/objectives.hpp"
#include "uvl/schedule.hpp"

namespace uvl {

// ---------------------------------------------------------------------------
// generic fine-tuning driver

struct FinetuneConfig {
    std::size_t epochs = 30;
    double lr = 1e-4;
    std::size_t batch_size = 16;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 1;
    double grad_clip = 1.0;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("fine-tune: learning rate must be positive");
        if (batch_size == 0) throw ConfigError("fine-tune: batch size must be positive");
        if (warmup_fraction < 0.0 || warmup_fraction > 0.5)
            throw ConfigError("fine-tune: warmup fraction must lie in [0, 0.5]");
        if (grad_clip < 0.0) throw ConfigError("fine-tune: grad clip must be >= 0");
    }
};

struct FinetuneResult {
    std::vector<double> epoch_losses;
    bool diverged = false;
    std::string abort_reason;
    std::vector<std::string> notices;
};

/// Mini-batch fine-tuning shared by every task head. The caller sets the
/// requires_grad flags first (that is what distinguishes the tasks along with
/// the loss); `batch_loss(indices, rng, ctx)` returns the scalar loss of one
/// batch. Batches smaller than `min_batch` are dropped from the epoch tail.
/// A non-finite loss rolls the parameters back to the last finished epoch.
template <typename BatchLoss>
FinetuneResult finetune_loop(UniVLModel& model, std::size_t n_items, const FinetuneConfig& cfg,
                             std::size_t min_batch, const std::string& label,
                             BatchLoss&& batch_loss) {
    cfg.validate();
    if (min_batch == 0) throw ConfigError("fine-tune: min_batch must be positive");
    FinetuneResult res;
    if (cfg.epochs == 0) return res;
    if (n_items < min_batch)
        throw DataError(label + ": " + std::to_string(n_items) + " items cannot fill a batch of " +
                        std::to_string(min_batch));

    NamedParams view = model.params.named();  // after the caller's flags: handles carry them
    AdamState adam;

    const std::size_t rem = n_items % cfg.batch_size;
    const std::size_t bpe = n_items / cfg.batch_size + (rem >= min_batch ? 1 : 0);
    const std::size_t total_steps = bpe * cfg.epochs;
    if (rem != 0 && rem < min_batch)
        res.notices.push_back(label + ": dropping " + std::to_string(rem) +
                              " trailing items each epoch (too few for a batch)");

    auto snap_values = [&] {
        std::map<std::string, std::vector<double>> v;
        for (const auto& [name, t] : view) v[name] = *t.data;
        return v;
    };
    std::map<std::string, std::vector<double>> good = snap_values();
    AdamState good_adam = adam;
    std::size_t good_epoch = 0;

    std::size_t global_step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::vector<std::size_t> order(n_items);
        std::iota(order.begin(), order.end(), 0);
        RngStream order_rng = RngStream::derive(cfg.seed, label + ".order", e);
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < bpe; ++b) {
            const std::size_t lo = b * cfg.batch_size;
            const std::size_t hi = std::min(lo + cfg.batch_size, n_items);
            const std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);

            const double lr = lr_at(global_step, total_steps, cfg.lr, cfg.warmup_fraction);
            model.params.zero_all_grads();
            RngStream drop_rng = RngStream::derive(cfg.seed, label + ".drop", e, b);
            RngStream loss_rng = RngStream::derive(cfg.seed, label + ".loss", e, b);
            const FwdCtx ctx{true, &drop_rng};
            try {
                const Tensor loss = batch_loss(idx, loss_rng, ctx);
                if (!std::isfinite(loss.scalar()))
                    throw NumericError(label + ": batch loss is not finite");
                loss.backward();
                epoch_loss += loss.scalar();
            } catch (const NumericError& err) {
                for (auto& [name, t] : view) *t.data = good.at(name);
                adam = good_adam;
                res.diverged = true;
                res.abort_reason = std::string(err.what()) + " at epoch " + std::to_string(e) +
                                   " batch " + std::to_string(b) + "; restored the epoch-" +
                                   std::to_string(good_epoch) + " state";
                break;
            }
            if (cfg.grad_clip > 0.0) clip_global_norm(view, cfg.grad_clip);
            adam_step(view, adam, lr);
            ++global_step;
        }
        if (res.diverged) break;
        res.epoch_losses.push_back(epoch_loss / static_cast<double>(bpe));
        good = snap_values();
        good_adam = adam;
        good_epoch = e + 1;
    }
    return res;
}

// ---------------------------------------------------------------------------
// retrieval

struct RetrievalResult {
    std::vector<std::vector<double>> scores;  // queries x candidates
    std::vector<std::size_t> ranks;           // 1-based rank of the true candidate
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
    double median_r = 0.0;
};

inline RetrievalResult retrieval_from_scores(std::vector<std::vector<double>> scores,
                                             const std::vector<std::size_t>& truth) {
    if (scores.empty()) throw DataError("retrieval: no queries");
    for (const auto& row : scores)
        if (row.empty()) throw DataError("retrieval: empty candidate set");
    RetrievalResult out;
    out.scores = std::move(scores);
    out.ranks = ranks_of_truth(out.scores, truth);
    out.r1 = recall_at(out.ranks, 1);
    out.r5 = recall_at(out.ranks, 5);
    out.r10 = recall_at(out.ranks, 10);
    out.median_r = median_rank(out.ranks);
    return out;
}

/// Square evaluation: query i's true candidate is candidate i.
inline RetrievalResult retrieval_from_scores(std::vector<std::vector<double>> scores) {
    std::vector<std::size_t> truth(scores.size());
    std::iota(truth.begin(), truth.end(), 0);
    return retrieval_from_scores(std::move(scores), truth);
}

inline std::vector<const ClipTextPair*> as_ptrs(const std::vector<ClipTextPair>& pairs) {
    std::vector<const ClipTextPair*> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(&p);
    return out;
}

/// Worker count for evaluation fan-out; UNIVL_DESK_THREADS caps it, default 1
/// so runs are byte-reproducible without asking anything of the scheduler.
inline std::size_t desk_threads() {
    const char* env = std::getenv("UNIVL_DESK_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
        throw ConfigError(std::string("UNIVL_DESK_THREADS must be a positive integer, got '") +
                          env + "'");
    return static_cast<std::size_t>(v);
}

/// score[i][j] = t_hat_i . v_hat_j from the single-modal towers only: one
/// encoder pass per transcript and per clip, then a dot-product grid.
inline std::vector<std::vector<double>> joint_score_matrix(
    const UniVLModel& model, const std::vector<const ClipTextPair*>& queries,
    const std::vector<const ClipTextPair*>& candidates) {
    if (queries.empty()) throw DataError("retrieval: no queries");
    if (candidates.empty()) throw DataError("retrieval: empty candidate set");
    NoGradGuard ng;
    const FwdCtx ctx{};
    std::vector<Tensor> t_hats, v_hats;
    for (const ClipTextPair* q : queries)
        t_hats.push_back(mean_pool_rows(model.encode_text(q->tokens, q->text_real, ctx),
                                        q->text_real));
    for (const ClipTextPair* c : candidates)
        v_hats.push_back(mean_pool_rows(model.encode_video(c->frames, c->video_real, ctx),
                                        c->video_real));
    const Tensor S = matmul(stack_rows(t_hats), transpose(stack_rows(v_hats)));
    std::vector<std::vector<double>> out(queries.size(), std::vector<double>(candidates.size()));
    for (std::size_t i = 0; i < queries.size(); ++i)
        for (std::size_t j = 0; j < candidates.size(); ++j) out[i][j] = S.at(i, j);
    return out;
}

/// score[i][j] = s(CLS) of the fused encoding of (transcript i, clip j).
/// Every cell is a full cross-encoder pass — quadratic in the candidate set
/// where the dot-product mode is linear; that cost is the price of fusion.
/// Query rows fan out across desk_threads() workers; every cell is a pure
/// function of read-only parameters, so the assembly order cannot matter.
inline std::vector<std::vector<double>> align_score_matrix(
    const UniVLModel& model, const std::vector<const ClipTextPair*>& queries,
    const std::vector<const ClipTextPair*>& candidates) {
    if (queries.empty()) throw DataError("retrieval: no queries");
    if (candidates.empty()) throw DataError("retrieval: empty candidate set");
    std::vector<std::vector<double>> out(queries.size(),
                                         std::vector<double>(candidates.size()));
    auto rows = [&](std::size_t lo, std::size_t hi) {
        NoGradGuard ng;  // the grad flag is thread_local: guard inside the worker
        const FwdCtx ctx{};
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < candidates.size(); ++j) {
                const EncodingBundle enc =
                    model.encode_pair(queries[i]->tokens, queries[i]->text_real,
                                      candidates[j]->frames, candidates[j]->video_real, ctx);
                out[i][j] = model.align_score(enc.cross).scalar();
            }
    };
    const std::size_t workers = std::min(desk_threads(), queries.size());
    if (workers <= 1) {
        rows(0, queries.size());
        return out;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mu;
    const std::size_t chunk = (queries.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(queries.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                rows(lo, hi);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return out;
}

inline RetrievalResult retrieve_joint(const UniVLModel& model,
                                      const std::vector<const ClipTextPair*>& pairs) {
    return retrieval_from_scores(joint_score_matrix(model, pairs, pairs));
}

inline RetrievalResult retrieve_align(const UniVLModel& model,
                                      const std::vector<const ClipTextPair*>& pairs) {
    return retrieval_from_scores(align_score_matrix(model, pairs, pairs));
}

enum class RetrievalMode { joint, align };

/// Fused-score fine-tuning loss on clean pairs: each transcript keeps its own
/// clip as the positive against up to 3 cyclically mismatched in-batch clips.
inline Tensor ft_align_loss(const UniVLModel& model,
                            const std::vector<const ClipTextPair*>& batch, const FwdCtx& ctx) {
    const std::size_t B = batch.size();
    if (B < 2) throw DataError("alignment fine-tuning needs at least 2 pairs per batch");
    const std::size_t take = std::min<std::size_t>(3, B - 1);
    Tensor acc = Tensor::scalar_of(0.0);
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<Tensor> scores;
        for (std::size_t step = 0; step <= take; ++step) {
            const std::size_t j = (i + step) % B;
            const EncodingBundle enc =
                model.encode_pair(batch[i]->tokens, batch[i]->text_real, batch[j]->frames,
                                  batch[j]->video_real, ctx);
            scores.push_back(model.align_score(enc.cross));
        }
        acc = add(acc, nce_row_loss(concat_cols(scores), 0));
    }
    return scale(acc, 1.0 / static_cast<double>(B));
}

/// Retrieval fine-tuning. Joint mode trains the towers under the contrastive
/// joint loss (the score it will be evaluated with); align mode trains the
/// full stack under the fused-score NCE.
inline FinetuneResult retrieval_finetune(UniVLModel& model,
                                         const std::vector<ClipTextPair>& train,
                                         RetrievalMode mode, const FinetuneConfig& cfg) {
    const std::vector<const ClipTextPair*> ptrs = as_ptrs(train);
    if (mode == RetrievalMode::joint) {
        model.params.set_requires_grad_by(ModelParameters::is_stage1_name);
        return finetune_loop(
            model, train.size(), cfg, 2, "ft.joint",
            [&](const std::vector<std::size_t>& idx, RngStream&, const FwdCtx& ctx) {
                std::vector<const ClipTextPair*> batch;
                for (std::size_t k : idx) batch.push_back(ptrs[k]);
                std::vector<Tensor> t_hats, v_hats;
                for (const ClipTextPair* p : batch) {
                    const Tensor T = model.encode_text(p->tokens, p->text_real, ctx);
                    const Tensor V = model.encode_video(p->frames, p->video_real, ctx);
                    auto [th, vh] = model.joint_embeddings(T, p->text_real, V, p->video_real);
                    t_hats.push_back(th);
                    v_hats.push_back(vh);
                }
                return loss_joint(stack_rows(t_hats), stack_rows(v_hats),
                                  PositivePairSet::build(batch));
            });
    }
    model.params.set_all_requires_grad(true);
    return finetune_loop(model, train.size(), cfg, 2, "ft.align",
                         [&](const std::vector<std::size_t>& idx, RngStream&, const FwdCtx& ctx) {
                             std::vector<const ClipTextPair*> batch;
                             for (std::size_t k : idx) batch.push_back(ptrs[k]);
                             return ft_align_loss(model, batch, ctx);
                         });
}

// ---------------------------------------------------------------------------
// beam search

struct Hypothesis {
    std::vector<int> tokens;  // BOS first
    double logp = 0.0;
    bool finished = false;  // emitted EOS, or was cut off at max length
};

/// Comparison score for finished hypotheses: log-probability per generated
/// token (EOS counts when emitted — its step contributed to the sum).
inline double length_normalized_score(const Hypothesis& h) {
    const std::size_t generated = h.tokens.size() > 1 ? h.tokens.size() - 1 : 1;
    return h.logp / static_cast<double>(generated);
}

/// Beam search over an arbitrary next-token distribution. `step_logprobs`
/// maps a prefix (starting with BOS) to log-probabilities over the
/// vocabulary. Growing hypotheses compete on cumulative log-probability;
/// finished ones on the length-normalized score. All ties break toward the
/// lexicographically smaller token sequence, and top-k token picks toward
/// the smaller id, so the result is deterministic. Hypotheses still alive at
/// `max_len` generated tokens are terminated as they stand, without an EOS.
template <typename StepLogProbs>
Hypothesis beam_decode(StepLogProbs&& step_logprobs, int bos, int eos, std::size_t beam_size,
                       std::size_t max_len) {
    if (beam_size == 0) throw ConfigError("beam search: beam size must be positive");
    if (max_len == 0) throw ConfigError("beam search: max length must be positive");

    auto lex_less = [](const std::vector<int>& a, const std::vector<int>& b) {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
    };

    std::vector<Hypothesis> live{Hypothesis{{bos}, 0.0, false}};
    std::vector<Hypothesis> done;
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hypothesis> cands;
        for (const Hypothesis& h : live) {
            const std::vector<double> lp = step_logprobs(h.tokens);
            if (lp.empty()) throw DataError("beam search: empty vocabulary distribution");
            std::vector<std::size_t> ids(lp.size());
            std::iota(ids.begin(), ids.end(), 0);
            std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
                if (lp[a] != lp[b]) return lp[a] > lp[b];
                return a < b;
            });
            const std::size_t fan = std::min(beam_size, ids.size());
            for (std::size_t k = 0; k < fan; ++k) {
                const int tok = static_cast<int>(ids[k]);
                Hypothesis next;
                next.tokens = h.tokens;
                next.tokens.push_back(tok);
                next.logp = h.logp + lp[ids[k]];
                next.finished = tok == eos;
                cands.push_back(std::move(next));
            }
        }
        std::sort(cands.begin(), cands.end(), [&](const Hypothesis& a, const Hypothesis& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return lex_less(a.tokens, b.tokens);
        });
        if (cands.size() > beam_size) cands.resize(beam_size);
        live.clear();
        for (Hypothesis& c : cands) (c.finished ? done : live).push_back(std::move(c));
    }
    for (Hypothesis& h : live) {
        h.finished = true;  // length cap reached
        done.push_back(std::move(h));
    }

    const Hypothesis* best = nullptr;
    for (const Hypothesis& h : done) {
        if (best == nullptr) {
            best = &h;
            continue;
        }
        const double s = length_normalized_score(h), bs = length_normalized_score(*best);
        if (s > bs || (s == bs && lex_less(h.tokens, best->tokens))) best = &h;
    }
    return *best;
}

/// Next-token log-probabilities from the decoder given fused memory M.
inline std::vector<double> decode_step_logprobs(const UniVLModel& model, const Tensor& memory,
                                                const BoolVec& memory_real,
                                                const std::vector<int>& prefix) {
    NoGradGuard ng;
    const Tensor logits = model.decode_logits(memory, memory_real, prefix, FwdCtx{});
    const std::size_t last = logits.shape[0] - 1, V = logits.shape[1];
    double mx = logits.at(last, 0);
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, logits.at(last, j));
    double se = 0.0;
    for (std::size_t j = 0; j < V; ++j) se += std::exp(logits.at(last, j) - mx);
    const double lse = mx + std::log(se);
    std::vector<double> lp(V);
    for (std::size_t j = 0; j < V; ++j) lp[j] = logits.at(last, j) - lse;
    return lp;
}

inline Hypothesis beam_search_hypothesis(const UniVLModel& model, const Tensor& memory,
                                         const BoolVec& memory_real, std::size_t beam_size,
                                         std::size_t max_len) {
    if (max_len + 1 > model.cfg.n_max)
        throw ConfigError("beam search: max length " + std::to_string(max_len) +
                          " plus BOS exceeds the decoder's " + std::to_string(model.cfg.n_max) +
                          " positions");
    return beam_decode(
        [&](const std::vector<int>& prefix) {
            return decode_step_logprobs(model, memory, memory_real, prefix);
        },
        model.cfg.bos_id, model.cfg.eos_id, beam_size, max_len);
}

/// Winning token body: BOS stripped, trailing EOS stripped.
inline std::vector<int> beam_search(const UniVLModel& model, const Tensor& memory,
                                    const BoolVec& memory_real, std::size_t beam_size,
                                    std::size_t max_len) {
    const Hypothesis h = beam_search_hypothesis(model, memory, memory_real, beam_size, max_len);
    std::vector<int> body(h.tokens.begin() + 1, h.tokens.end());
    if (!body.empty() && body.back() == model.cfg.eos_id) body.pop_back();
    return body;
}

// ---------------------------------------------------------------------------
// split selection shared by the fine-tune-and-eval entry points

inline const std::vector<ClipTextPair>& resolve_eval_split(const Corpus& corpus,
                                                           const std::string& requested,
                                                           std::string& resolved) {
    resolved = requested == "auto" ? (corpus.val.empty() ? "train" : "val") : requested;
    return corpus.split(resolved);
}

// ---------------------------------------------------------------------------
// captioning

/// Teacher-forced caption loss: clean fused memory, BOS + caption in,
/// caption + EOS out.
inline Tensor caption_loss(const UniVLModel& model, const ClipTextPair& pair,
                           const std::vector<int>& caption_ids, const FwdCtx& ctx) {
    if (caption_ids.empty())
        throw DataError("caption loss: pair " + pair.video_id + "#" +
                        std::to_string(pair.clip_index) + " has an empty caption");
    const EncodingBundle enc =
        model.encode_pair(pair.tokens, pair.text_real, pair.frames, pair.video_real, ctx);
    std::vector<int> input{model.cfg.bos_id};
    input.insert(input.end(), caption_ids.begin(), caption_ids.end());
    std::vector<int> targets = caption_ids;
    targets.push_back(model.cfg.eos_id);
    BoolVec mem_real = pair.text_real;
    mem_real.insert(mem_real.end(), pair.video_real.begin(), pair.video_real.end());
    return cross_entropy(model.decode_logits(enc.cross, mem_real, input, ctx), targets);
}

struct CaptionEval {
    double bleu3 = 0.0, bleu4 = 0.0, rouge_l = 0.0;
    std::size_t evaluated = 0;
    std::string eval_split;
    FinetuneResult finetune;
};

/// Fine-tune the full stack on (transcript+clip -> caption), then score
/// beam-searched captions with corpus BLEU and sentence-averaged ROUGE-L.
inline CaptionEval caption_finetune_and_eval(UniVLModel& model, const Corpus& corpus,
                                             const FinetuneConfig& cfg,
                                             std::size_t beam_size = 5,
                                             const std::string& eval_split = "auto") {
    std::vector<std::vector<int>> caption_ids;
    caption_ids.reserve(corpus.train.size());
    for (const ClipTextPair& p : corpus.train)
        caption_ids.push_back(tokenize(p.caption, corpus.vocab));

    model.params.set_all_requires_grad(true);
    CaptionEval out;
    out.finetune = finetune_loop(
        model, corpus.train.size(), cfg, 1, "ft.caption",
        [&](const std::vector<std::size_t>& idx, RngStream&, const FwdCtx& ctx) {
            Tensor acc = Tensor::scalar_of(0.0);
            for (std::size_t k : idx)
                acc = add(acc, caption_loss(model, corpus.train[k], caption_ids[k], ctx));
            return scale(acc, 1.0 / static_cast<double>(idx.size()));
        });

    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, eval_split, out.eval_split);
    if (pairs.empty()) throw DataError("caption eval: split '" + out.eval_split + "' is empty");
    std::vector<TokenSeq> cands, refs;
    {
        NoGradGuard ng;
        const FwdCtx ectx{};
        const std::size_t max_len = model.cfg.n_max - 1;
        for (const ClipTextPair& p : pairs) {
            const EncodingBundle enc =
                model.encode_pair(p.tokens, p.text_real, p.frames, p.video_real, ectx);
            BoolVec mem_real = p.text_real;
            mem_real.insert(mem_real.end(), p.video_real.begin(), p.video_real.end());
            cands.push_back(beam_search(model, enc.cross, mem_real, beam_size, max_len));
            refs.push_back(tokenize(p.caption, corpus.vocab));
        }
    }
    out.bleu3 = bleu(cands, refs, 3);
    out.bleu4 = bleu(cands, refs, 4);
    out.rouge_l = rouge_l(cands, refs);
    out.evaluated = pairs.size();
    return out;
}

// ---------------------------------------------------------------------------
// action segmentation

/// The transcript never enters this task; only the video tower and the frame
/// head carry gradient.
inline bool is_video_side_name(const std::string& name) {
    return name.rfind("video_in.", 0) == 0 || name.rfind("video.", 0) == 0 ||
           name.rfind("frame_cls.", 0) == 0 || name == "embed.video_pos";
}

/// Per-frame argmax labels (ties to the smaller class); padded rows get -1.
inline std::vector<int> segmentation_predict(const UniVLModel& model, const ClipTextPair& pair) {
    if (pair.frames.shape.empty() || pair.frames.shape[0] == 0)
        throw DataError("segmentation: clip " + pair.video_id + "#" +
                        std::to_string(pair.clip_index) + " has no frames");
    NoGradGuard ng;
    const Tensor logits =
        model.frame_logits(model.encode_video(pair.frames, pair.video_real, FwdCtx{}));
    const std::size_t rows = logits.shape[0], classes = logits.shape[1];
    std::vector<int> labels(rows, -1);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!pair.video_real[r]) continue;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        labels[r] = static_cast<int>(best);
    }
    return labels;
}

struct SegmentationEval {
    double accuracy = 0.0;
    std::size_t frames_scored = 0;
    std::string eval_split;
    FinetuneResult finetune;
};

inline SegmentationEval segmentation_finetune_and_eval(UniVLModel& model, const Corpus& corpus,
                                                       const FinetuneConfig& cfg,
                                                       const std::string& eval_split = "auto") {
    const std::size_t classes = model.cfg.frame_classes;
    auto checked_targets = [&](const ClipTextPair& p) {
        std::vector<int> targets(p.frame_labels.size());
        for (std::size_t r = 0; r < p.frame_labels.size(); ++r) {
            const int lbl = p.frame_labels[r];
            if (lbl < 0 || static_cast<std::size_t>(lbl) >= classes)
                throw DataError("segmentation: frame label " + std::to_string(lbl) +
                                " outside the " + std::to_string(classes) + "-way head");
            targets[r] = p.video_real[r] ? lbl : -1;
        }
        return targets;
    };

    model.params.set_requires_grad_by(is_video_side_name);
    SegmentationEval out;
    out.finetune = finetune_loop(
        model, corpus.train.size(), cfg, 1, "ft.segment",
        [&](const std::vector<std::size_t>& idx, RngStream&, const FwdCtx& ctx) {
            Tensor acc = Tensor::scalar_of(0.0);
            for (std::size_t k : idx) {
                const ClipTextPair& p = corpus.train[k];
                const Tensor logits =
                    model.frame_logits(model.encode_video(p.frames, p.video_real, ctx));
                acc = add(acc, cross_entropy(logits, checked_targets(p)));
            }
            return scale(acc, 1.0 / static_cast<double>(idx.size()));
        });

    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, eval_split, out.eval_split);
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

// ---------------------------------------------------------------------------
// step localization (zero-shot — no fine-tuning by design)

struct LocalizationEval {
    double recall = 0.0;
    double random_baseline = 0.0;  // expected recall of a uniform-random scorer
    std::size_t evaluated = 0, skipped = 0;
    std::vector<std::string> notices;
};

/// For each annotated step, score every frame of the step's whole video
/// (clips concatenated in clip order) by t_hat . v_row, where t_hat is the
/// pooled encoding of the step description and v_row the per-frame video
/// encoder state — no pooling, so "argmax inside the segment" is well
/// defined. A step counts as recalled iff the argmax frame falls in its
/// ground-truth interval. Runs on the pre-trained model as-is.
inline LocalizationEval step_localization(const UniVLModel& model,
                                          const std::vector<ClipTextPair>& pairs,
                                          const Vocabulary& vocab) {
    if (pairs.empty()) throw DataError("localization: no clips");
    NoGradGuard ng;
    const FwdCtx ctx{};

    std::map<std::string, std::vector<const ClipTextPair*>> by_video;
    for (const ClipTextPair& p : pairs) by_video[p.video_id].push_back(&p);

    LocalizationEval out;
    std::size_t hits = 0;
    double base = 0.0;
    for (auto& [vid, clips] : by_video) {
        std::sort(clips.begin(), clips.end(), [](const ClipTextPair* a, const ClipTextPair* b) {
            return a->clip_index < b->clip_index;
        });
        std::vector<Tensor> states;
        std::vector<std::size_t> offsets;
        BoolVec real_all;
        std::size_t total_rows = 0, real_rows = 0;
        for (const ClipTextPair* c : clips) {
            offsets.push_back(total_rows);
            states.push_back(model.encode_video(c->frames, c->video_real, ctx));
            total_rows += states.back().shape[0];
            real_all.insert(real_all.end(), c->video_real.begin(), c->video_real.end());
            for (std::uint8_t r : c->video_real) real_rows += r ? 1 : 0;
        }
        if (real_rows == 0) continue;
        const Tensor video_states = concat_rows(states);

        for (std::size_t ci = 0; ci < clips.size(); ++ci) {
            for (const ClipTextPair::StepSpan& s : clips[ci]->steps) {
                const std::size_t clip_rows = states[ci].shape[0];
                if (s.begin >= s.end || s.end > clip_rows) {
                    ++out.skipped;
                    out.notices.push_back("localization: step '" + s.description + "' of " + vid +
                                          "#" + std::to_string(clips[ci]->clip_index) +
                                          " has no annotated segment, skipped");
                    continue;
                }
                std::vector<int> ids{model.cfg.cls_id};
                for (int t : tokenize(s.description, vocab)) ids.push_back(t);
                ids.push_back(model.cfg.sep_id);
                const BoolVec ids_real(ids.size(), 1);
                const Tensor t_hat =
                    mean_pool_rows(model.encode_text(ids, ids_real, ctx), ids_real);
                const Tensor scores = matmul(video_states, transpose(stack_rows({t_hat})));

                std::size_t best = total_rows;
                for (std::size_t r = 0; r < total_rows; ++r) {
                    if (!real_all[r]) continue;
                    if (best == total_rows || scores.at(r, 0) > scores.at(best, 0)) best = r;
                }
                const std::size_t lo = offsets[ci] + s.begin, hi = offsets[ci] + s.end;
                if (best >= lo && best < hi) ++hits;
                base += static_cast<double>(s.end - s.begin) / static_cast<double>(real_rows);
                ++out.evaluated;
            }
        }
    }
    if (out.evaluated == 0) throw DataError("localization: no annotated steps to evaluate");
    out.recall = static_cast<double>(hits) / static_cast<double>(out.evaluated);
    out.random_baseline = base / static_cast<double>(out.evaluated);
    return out;
}

// ---------------------------------------------------------------------------
// sentiment regression

inline double sentiment_predict(const UniVLModel& model, const ClipTextPair& pair) {
    NoGradGuard ng;
    const EncodingBundle enc =
        model.encode_pair(pair.tokens, pair.text_real, pair.frames, pair.video_real, FwdCtx{});
    return model.sentiment_score(enc.cross).scalar();
}

inline Tensor sentiment_loss(const UniVLModel& model, const ClipTextPair& pair,
                             const FwdCtx& ctx) {
    const EncodingBundle enc =
        model.encode_pair(pair.tokens, pair.text_real, pair.frames, pair.video_real, ctx);
    const Tensor diff =
        sub(sum_all(model.sentiment_score(enc.cross)), Tensor::scalar_of(pair.sentiment));
    return mul(diff, diff);  // squared error, [1]
}

struct SentimentEval {
    SentimentMetrics metrics;
    std::size_t evaluated = 0;
    std::string eval_split;
    FinetuneResult finetune;
};

inline SentimentEval sentiment_finetune_and_eval(UniVLModel& model, const Corpus& corpus,
                                                 const FinetuneConfig& cfg,
                                                 const std::string& eval_split = "auto") {
    model.params.set_all_requires_grad(true);
    SentimentEval out;
    out.finetune = finetune_loop(
        model, corpus.train.size(), cfg, 1, "ft.senti",
        [&](const std::vector<std::size_t>& idx, RngStream&, const FwdCtx& ctx) {
            Tensor acc = Tensor::scalar_of(0.0);
            for (std::size_t k : idx) acc = add(acc, sentiment_loss(model, corpus.train[k], ctx));
            return scale(acc, 1.0 / static_cast<double>(idx.size()));
        });

    const std::vector<ClipTextPair>& pairs = resolve_eval_split(corpus, eval_split, out.eval_split);
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

// ---------------------------------------------------------------------------
// evaluation report records

struct MetricRecord {
    std::string task, metric;
    double value = 0.0;
    std::string checkpoint_hash;
    std::uint64_t corpus_seed = 0;
};

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// One report line; field order is fixed so reports diff cleanly. An
/// undefined value (e.g. correlation of constant predictions) serializes as
/// null rather than NaN, which JSON cannot carry.
inline nlohmann::ordered_json to_json(const MetricRecord& r) {
    nlohmann::ordered_json j;
    j["task"] = r.task;
    j["metric"] = r.metric;
    if (std::isfinite(r.value))
        j["value"] = r.value;
    else
        j["value"] = nullptr;
    j["checkpoint_hash"] = r.checkpoint_hash;
    j["corpus_seed"] = r.corpus_seed;
    return j;
}

} // namespace uvl

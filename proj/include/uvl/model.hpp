#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uvl/transformer.hpp"

namespace uvl {

/// Architecture hyperparameters plus the reserved token ids. Defaults are the
/// desk-scale configuration every tool uses unless overridden.
struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d = 64;      // shared hidden width
    std::size_t d_f = 32;    // raw frame-feature width
    std::size_t n_max = 32;  // text positions
    std::size_t m_max = 48;  // video positions
    std::size_t text_layers = 2;
    std::size_t video_layers = 2;
    std::size_t cross_layers = 1;
    std::size_t decoder_layers = 1;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    double dropout = 0.1;
    GeluKind gelu_kind = GeluKind::Exact;
    std::size_t frame_classes = 8;

    int pad_id = 0, cls_id = 1, sep_id = 2, mask_id = 3, bos_id = 4, eos_id = 5;

    void validate() const {
        if (vocab_size == 0 || d == 0 || d_f == 0 || n_max == 0 || m_max == 0)
            throw ConfigError("model config: zero-sized dimension");
        if (d % heads != 0)
            throw ConfigError("model config: d=" + std::to_string(d) +
                              " not divisible by heads=" + std::to_string(heads));
        const int ids[6] = {pad_id, cls_id, sep_id, mask_id, bos_id, eos_id};
        for (int i = 0; i < 6; ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size)
                throw ConfigError("model config: special token id " + std::to_string(ids[i]) +
                                  " outside vocabulary of size " + std::to_string(vocab_size));
            for (int j = i + 1; j < 6; ++j)
                if (ids[i] == ids[j])
                    throw ConfigError("model config: special token ids must be distinct");
        }
        if (frame_classes == 0) throw ConfigError("model config: frame_classes must be positive");
    }

    BlockConfig block() const { return BlockConfig{d, heads, ffn_dim, dropout, gelu_kind}; }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{
        {"vocab_size", c.vocab_size},   {"d", c.d},
        {"d_f", c.d_f},                 {"n_max", c.n_max},
        {"m_max", c.m_max},             {"text_layers", c.text_layers},
        {"video_layers", c.video_layers}, {"cross_layers", c.cross_layers},
        {"decoder_layers", c.decoder_layers}, {"heads", c.heads},
        {"ffn_dim", c.ffn_dim},         {"dropout", c.dropout},
        {"gelu", c.gelu_kind == GeluKind::Exact ? "exact" : "tanh"},
        {"frame_classes", c.frame_classes},
        {"pad_id", c.pad_id}, {"cls_id", c.cls_id}, {"sep_id", c.sep_id},
        {"mask_id", c.mask_id}, {"bos_id", c.bos_id}, {"eos_id", c.eos_id}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.d_f = j.at("d_f").get<std::size_t>();
    c.n_max = j.at("n_max").get<std::size_t>();
    c.m_max = j.at("m_max").get<std::size_t>();
    c.text_layers = j.at("text_layers").get<std::size_t>();
    c.video_layers = j.at("video_layers").get<std::size_t>();
    c.cross_layers = j.at("cross_layers").get<std::size_t>();
    c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.gelu_kind = j.at("gelu").get<std::string>() == "tanh" ? GeluKind::Tanh : GeluKind::Exact;
    c.frame_classes = j.at("frame_classes").get<std::size_t>();
    c.pad_id = j.at("pad_id").get<int>();
    c.cls_id = j.at("cls_id").get<int>();
    c.sep_id = j.at("sep_id").get<int>();
    c.mask_id = j.at("mask_id").get<int>();
    c.bos_id = j.at("bos_id").get<int>();
    c.eos_id = j.at("eos_id").get<int>();
    c.validate();
    return c;
}

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Every learnable tensor, addressable by a stable dotted name. Handles share
/// storage, so the named view and the structured view update together.
struct ModelParameters {
    Tensor token_embedding; // vocab x d
    Tensor text_pos;        // n_max x d
    Tensor video_proj_w;    // d_f x d
    Tensor video_proj_b;    // d
    Tensor video_pos;       // m_max x d
    Tensor seg_text;        // d, added to text rows entering the cross encoder
    Tensor seg_video;       // d
    std::vector<EncoderLayerParams> text_layers, video_layers, cross_layers;
    std::vector<DecoderLayerParams> decoder_layers;
    Tensor align_w1, align_b1, align_w2, align_b2; // d->d tanh, d->1
    Tensor mlm_w, mlm_b;                           // d->vocab
    Tensor cmfm_w, cmfm_b;                         // d_f->d frame transform
    Tensor dec_w, dec_b;                           // d->vocab generation head
    Tensor frame_w, frame_b;                       // d->frame_classes
    Tensor senti_w, senti_b;                       // d->1

    static ModelParameters init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParameters p;
        RngStream rng = RngStream::derive(seed, "init");
        const double sd = 0.02;
        auto W = [&](std::size_t r, std::size_t c) { return Tensor::randn({r, c}, rng, sd); };
        auto vec0 = [&](std::size_t n) { return Tensor::zeros({n}); };
        auto vec1 = [&](std::size_t n) { return Tensor::filled({n}, 1.0); };
        auto attn = [&] {
            AttnParams a;
            a.wq = W(cfg.d, cfg.d); a.bq = vec0(cfg.d);
            a.wk = W(cfg.d, cfg.d); a.bk = vec0(cfg.d);
            a.wv = W(cfg.d, cfg.d); a.bv = vec0(cfg.d);
            a.wo = W(cfg.d, cfg.d); a.bo = vec0(cfg.d);
            return a;
        };
        auto ffn = [&] {
            FfnParams f;
            f.w1 = W(cfg.d, cfg.ffn_dim); f.b1 = vec0(cfg.ffn_dim);
            f.w2 = W(cfg.ffn_dim, cfg.d); f.b2 = vec0(cfg.d);
            return f;
        };
        auto enc_layer = [&] {
            EncoderLayerParams e;
            e.attn = attn();
            e.ffn = ffn();
            e.ln1_g = vec1(cfg.d); e.ln1_b = vec0(cfg.d);
            e.ln2_g = vec1(cfg.d); e.ln2_b = vec0(cfg.d);
            return e;
        };
        auto dec_layer = [&] {
            DecoderLayerParams dl;
            dl.self_attn = attn();
            dl.cross_attn = attn();
            dl.ffn = ffn();
            dl.ln1_g = vec1(cfg.d); dl.ln1_b = vec0(cfg.d);
            dl.ln2_g = vec1(cfg.d); dl.ln2_b = vec0(cfg.d);
            dl.ln3_g = vec1(cfg.d); dl.ln3_b = vec0(cfg.d);
            return dl;
        };
        p.token_embedding = W(cfg.vocab_size, cfg.d);
        p.text_pos = W(cfg.n_max, cfg.d);
        p.video_proj_w = W(cfg.d_f, cfg.d);
        p.video_proj_b = vec0(cfg.d);
        p.video_pos = W(cfg.m_max, cfg.d);
        p.seg_text = Tensor::randn({cfg.d}, rng, sd);
        p.seg_video = Tensor::randn({cfg.d}, rng, sd);
        for (std::size_t i = 0; i < cfg.text_layers; ++i) p.text_layers.push_back(enc_layer());
        for (std::size_t i = 0; i < cfg.video_layers; ++i) p.video_layers.push_back(enc_layer());
        for (std::size_t i = 0; i < cfg.cross_layers; ++i) p.cross_layers.push_back(enc_layer());
        for (std::size_t i = 0; i < cfg.decoder_layers; ++i) p.decoder_layers.push_back(dec_layer());
        p.align_w1 = W(cfg.d, cfg.d);
        p.align_b1 = vec0(cfg.d);
        p.align_w2 = W(cfg.d, 1);
        p.align_b2 = vec0(1);
        p.mlm_w = W(cfg.d, cfg.vocab_size);
        p.mlm_b = vec0(cfg.vocab_size);
        p.cmfm_w = W(cfg.d_f, cfg.d);
        p.cmfm_b = vec0(cfg.d);
        p.dec_w = W(cfg.d, cfg.vocab_size);
        p.dec_b = vec0(cfg.vocab_size);
        p.frame_w = W(cfg.d, cfg.frame_classes);
        p.frame_b = vec0(cfg.frame_classes);
        p.senti_w = W(cfg.d, 1);
        p.senti_b = vec0(1);
        return p;
    }

    /// Calls fn(name, tensor) for every parameter in registry order. Works on
    /// const and mutable objects; the mutable form reaches the real members.
    template <class Self, class Fn>
    static void visit(Self& self, Fn&& add) {
        auto add_attn = [&](const std::string& pre, auto& a) {
            add(pre + ".wq", a.wq); add(pre + ".bq", a.bq);
            add(pre + ".wk", a.wk); add(pre + ".bk", a.bk);
            add(pre + ".wv", a.wv); add(pre + ".bv", a.bv);
            add(pre + ".wo", a.wo); add(pre + ".bo", a.bo);
        };
        auto add_ffn = [&](const std::string& pre, auto& f) {
            add(pre + ".w1", f.w1); add(pre + ".b1", f.b1);
            add(pre + ".w2", f.w2); add(pre + ".b2", f.b2);
        };
        auto add_enc = [&](const std::string& pre, auto& ls) {
            for (std::size_t i = 0; i < ls.size(); ++i) {
                const std::string base = pre + "." + std::to_string(i);
                add_attn(base + ".attn", ls[i].attn);
                add_ffn(base + ".ffn", ls[i].ffn);
                add(base + ".ln1.g", ls[i].ln1_g); add(base + ".ln1.b", ls[i].ln1_b);
                add(base + ".ln2.g", ls[i].ln2_g); add(base + ".ln2.b", ls[i].ln2_b);
            }
        };
        add("embed.token", self.token_embedding);
        add("embed.text_pos", self.text_pos);
        add("video_in.w", self.video_proj_w);
        add("video_in.b", self.video_proj_b);
        add("embed.video_pos", self.video_pos);
        add("segment.text", self.seg_text);
        add("segment.video", self.seg_video);
        add_enc("text", self.text_layers);
        add_enc("video", self.video_layers);
        add_enc("cross", self.cross_layers);
        for (std::size_t i = 0; i < self.decoder_layers.size(); ++i) {
            auto& dl = self.decoder_layers[i];
            const std::string base = "decoder." + std::to_string(i);
            add_attn(base + ".self", dl.self_attn);
            add_attn(base + ".cross", dl.cross_attn);
            add_ffn(base + ".ffn", dl.ffn);
            add(base + ".ln1.g", dl.ln1_g); add(base + ".ln1.b", dl.ln1_b);
            add(base + ".ln2.g", dl.ln2_g); add(base + ".ln2.b", dl.ln2_b);
            add(base + ".ln3.g", dl.ln3_g); add(base + ".ln3.b", dl.ln3_b);
        }
        add("align.w1", self.align_w1); add("align.b1", self.align_b1);
        add("align.w2", self.align_w2); add("align.b2", self.align_b2);
        add("mlm.w", self.mlm_w); add("mlm.b", self.mlm_b);
        add("cmfm.w", self.cmfm_w); add("cmfm.b", self.cmfm_b);
        add("dec_head.w", self.dec_w); add("dec_head.b", self.dec_b);
        add("frame_cls.w", self.frame_w); add("frame_cls.b", self.frame_b);
        add("senti.w", self.senti_w); add("senti.b", self.senti_b);
    }

    /// Handle copies in registry order. Shares value/grad storage with the
    /// members, so optimizer updates through this view are visible — but the
    /// requires_grad flag must be toggled via the setters below, not here.
    NamedParams named() const {
        NamedParams out;
        visit(*this, [&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
        return out;
    }

    /// First-stage trainables: the two unimodal towers and their input maps.
    static bool is_stage1_name(const std::string& name) {
        for (const char* pre : {"embed.", "video_in.", "text.", "video."})
            if (name.rfind(pre, 0) == 0) return true;
        return false;
    }

    NamedParams named_stage1() const {
        NamedParams all = named(), out;
        for (auto& kv : all)
            if (is_stage1_name(kv.first)) out.push_back(kv);
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named()) n += t.numel();
        return n;
    }

    void set_all_requires_grad(bool rg) {
        visit(*this, [&](const std::string&, Tensor& t) { t.set_requires_grad(rg); });
    }

    void set_requires_grad_by(const std::function<bool(const std::string&)>& pred) {
        visit(*this, [&](const std::string& n, Tensor& t) { t.set_requires_grad(pred(n)); });
    }

    void zero_all_grads() {
        visit(*this, [&](const std::string&, Tensor& t) { t.zero_grad(); });
    }
};

/// Outputs of one full encode pass over a clip-text pair.
struct EncodingBundle {
    Tensor text;   // n x d
    Tensor video;  // m x d
    Tensor cross;  // (n+m) x d, text rows first
    BoolVec text_real, video_real;
};

class UniVLModel {
public:
    ModelConfig cfg;
    ModelParameters params;

    UniVLModel() = default;
    UniVLModel(ModelConfig c, ModelParameters p) : cfg(std::move(c)), params(std::move(p)) {
        cfg.validate();
    }

    static UniVLModel init(const ModelConfig& cfg, std::uint64_t seed) {
        return UniVLModel(cfg, ModelParameters::init(cfg, seed));
    }

    /// Token ids -> contextual text states [n x d].
    Tensor encode_text(const std::vector<int>& ids, const BoolVec& real, const FwdCtx& ctx) const {
        if (ids.empty()) throw DataError("encode_text: empty token sequence");
        if (ids.size() > cfg.n_max)
            throw DataError("encode_text: " + std::to_string(ids.size()) + " tokens exceeds n_max=" +
                            std::to_string(cfg.n_max));
        if (real.size() != ids.size())
            throw MaskError("encode_text: mask length " + std::to_string(real.size()) +
                            " vs tokens " + std::to_string(ids.size()));
        Tensor x = add(embedding_lookup(params.token_embedding, ids),
                       slice_rows(params.text_pos, 0, ids.size()));
        x = maybe_dropout(x, cfg.dropout, ctx);
        AttentionMask mask = AttentionMask::padding(ids.size(), real);
        return encoder_stack(x, params.text_layers, mask, cfg.block(), ctx);
    }

    /// Raw frame features [m x d_f] -> contextual video states [m x d].
    Tensor encode_video(const Tensor& frames, const BoolVec& real, const FwdCtx& ctx) const {
        detail::check_matrix(frames, "encode_video");
        const std::size_t m = frames.shape[0];
        if (m == 0) throw DataError("encode_video: empty frame sequence");
        if (m > cfg.m_max)
            throw DataError("encode_video: " + std::to_string(m) + " frames exceeds m_max=" +
                            std::to_string(cfg.m_max));
        if (frames.shape[1] != cfg.d_f)
            throw ShapeError("encode_video: frame width " + std::to_string(frames.shape[1]) +
                             " but d_f=" + std::to_string(cfg.d_f));
        if (real.size() != m)
            throw MaskError("encode_video: mask length " + std::to_string(real.size()) +
                            " vs frames " + std::to_string(m));
        Tensor x = add(add_bias(matmul(frames, params.video_proj_w), params.video_proj_b),
                       slice_rows(params.video_pos, 0, m));
        x = maybe_dropout(x, cfg.dropout, ctx);
        AttentionMask mask = AttentionMask::padding(m, real);
        return encoder_stack(x, params.video_layers, mask, cfg.block(), ctx);
    }

    /// Fused representation M [(n+m) x d]. With zero cross layers this is
    /// exactly the row-concatenation of the unimodal states; with layers the
    /// inputs additionally carry modality segment embeddings.
    Tensor encode_cross(const Tensor& text, const Tensor& video, const BoolVec& text_real,
                        const BoolVec& video_real, const FwdCtx& ctx) const {
        if (params.cross_layers.empty()) return concat_rows({text, video});
        Tensor x = concat_rows({add_bias(text, params.seg_text), add_bias(video, params.seg_video)});
        BoolVec real = text_real;
        real.insert(real.end(), video_real.begin(), video_real.end());
        AttentionMask mask = AttentionMask::padding(x.rows(), real);
        return encoder_stack(x, params.cross_layers, mask, cfg.block(), ctx);
    }

    EncodingBundle encode_pair(const std::vector<int>& ids, const BoolVec& text_real,
                               const Tensor& frames, const BoolVec& video_real,
                               const FwdCtx& ctx) const {
        EncodingBundle b;
        b.text = encode_text(ids, text_real, ctx);
        b.video = encode_video(frames, video_real, ctx);
        b.cross = encode_cross(b.text, b.video, text_real, video_real, ctx);
        b.text_real = text_real;
        b.video_real = video_real;
        return b;
    }

    /// Sequence-mean unimodal embeddings for the retrieval dot product.
    std::pair<Tensor, Tensor> joint_embeddings(const Tensor& text, const BoolVec& text_real,
                                               const Tensor& video, const BoolVec& video_real) const {
        return {mean_pool_rows(text, text_real), mean_pool_rows(video, video_real)};
    }

    /// Alignment score s(M): two-layer head with tanh on the fused CLS row.
    Tensor align_score(const Tensor& cross) const {
        Tensor cls = slice_rows(cross, 0, 1);
        Tensor h = tanh_op(add_bias(matmul(cls, params.align_w1), params.align_b1));
        return add_bias(matmul(h, params.align_w2), params.align_b2); // [1 x 1]
    }

    /// Vocabulary logits over the text rows of M (masked-token recovery head).
    Tensor mlm_logits(const Tensor& cross, std::size_t n_text) const {
        Tensor text_part = slice_rows(cross, 0, n_text);
        return add_bias(matmul(text_part, params.mlm_w), params.mlm_b);
    }

    /// Teacher-forced decoder pass: memory M and shifted target ids -> logits
    /// [L x vocab]. Decoder input reuses token + text position embeddings.
    Tensor decode_logits(const Tensor& memory, const BoolVec& memory_real,
                         const std::vector<int>& input_ids, const FwdCtx& ctx) const {
        if (input_ids.empty()) throw DataError("decode_logits: empty decoder input");
        if (input_ids[0] != cfg.bos_id)
            throw DataError("decode_logits: decoder input must start with BOS, got id " +
                            std::to_string(input_ids[0]));
        if (input_ids.size() > cfg.n_max)
            throw DataError("decode_logits: " + std::to_string(input_ids.size()) +
                            " positions exceeds n_max=" + std::to_string(cfg.n_max));
        Tensor x = add(embedding_lookup(params.token_embedding, input_ids),
                       slice_rows(params.text_pos, 0, input_ids.size()));
        x = maybe_dropout(x, cfg.dropout, ctx);
        AttentionMask self_mask = AttentionMask::causal(BoolVec(input_ids.size(), 1));
        AttentionMask mem_mask = AttentionMask::padding(input_ids.size(), memory_real);
        Tensor h = decoder_stack(x, memory, params.decoder_layers, self_mask, mem_mask,
                                 cfg.block(), ctx);
        return add_bias(matmul(h, params.dec_w), params.dec_b);
    }

    Tensor frame_logits(const Tensor& video_states) const {
        return add_bias(matmul(video_states, params.frame_w), params.frame_b);
    }

    Tensor sentiment_score(const Tensor& cross) const {
        Tensor cls = slice_rows(cross, 0, 1);
        return add_bias(matmul(cls, params.senti_w), params.senti_b); // [1 x 1]
    }
};

} // namespace uvl

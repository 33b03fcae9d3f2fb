#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mars/ops.hpp"
#include "mars/random.hpp"
#include "mars/tokenize.hpp"

namespace mars {

inline constexpr float kLayerNormEps = 1e-5f;

struct ModelConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t context = 160;
    std::size_t ffn_mult = 4;
    std::size_t text_size = kByteVocab;

    std::size_t ffn_hidden() const { return ffn_mult * d; }
    // width of the donor vocabulary and of the text head: bytes plus specials
    std::size_t text_vocab() const { return text_size + kSpecialCount; }

    void validate() const {
        if (d == 0 || heads == 0 || layers == 0 || context == 0 || ffn_mult == 0 || text_size == 0)
            throw ConfigError("model geometry must be positive");
        if (d % heads != 0)
            throw ConfigError("width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
using BasicNamedTensor = std::pair<std::string, BasicTensor<T>>;
using NamedTensor = BasicNamedTensor<float>;

/// Q/K/V/output projections and the two FFN matrices of one expert.
template <class T>
struct BasicExpertParams {
    BasicTensor<T> wq, wk, wv, wo, w1, w2;

    bool defined() const { return wq.defined(); }

    BasicExpertParams clone(bool requires_grad) const {
        return {wq.clone(requires_grad), wk.clone(requires_grad), wv.clone(requires_grad),
                wo.clone(requires_grad), w1.clone(requires_grad), w2.clone(requires_grad)};
    }

    template <class S>
    BasicExpertParams<S> cast() const {
        if (!defined()) return {};
        return {wq.template cast<S>(), wk.template cast<S>(), wv.template cast<S>(),
                wo.template cast<S>(), w1.template cast<S>(), w2.template cast<S>()};
    }

    void append_named(const std::string& prefix, std::vector<BasicNamedTensor<T>>& out) const {
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".wo", wo);
        out.emplace_back(prefix + ".w1", w1);
        out.emplace_back(prefix + ".w2", w2);
    }
};

using ExpertParams = BasicExpertParams<float>;

/// One decoder layer: shared norms plus a text expert and (for SemVIE) a
/// vision expert of identical shape.
template <class T>
struct BasicLayerParams {
    BasicTensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    BasicExpertParams<T> text;
    BasicExpertParams<T> vision;

    template <class S>
    BasicLayerParams<S> cast() const {
        return {ln1_gamma.template cast<S>(), ln1_beta.template cast<S>(), ln2_gamma.template cast<S>(),
                ln2_beta.template cast<S>(), text.template cast<S>(), vision.template cast<S>()};
    }
};

using LayerParams = BasicLayerParams<float>;

namespace detail {

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<float> data(rows * cols);
    for (float& v : data) v = static_cast<float>(rng.normal() * stddev);
    return Tensor({rows, cols}, std::move(data));
}

inline ExpertParams random_expert(Rng& rng, const ModelConfig& cfg) {
    const double proj = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    ExpertParams e;
    e.wq = random_matrix(rng, cfg.d, cfg.d, proj);
    e.wk = random_matrix(rng, cfg.d, cfg.d, proj);
    e.wv = random_matrix(rng, cfg.d, cfg.d, proj);
    e.wo = random_matrix(rng, cfg.d, cfg.d, proj * out_scale);
    e.w1 = random_matrix(rng, cfg.d, cfg.ffn_hidden(), proj);
    e.w2 = random_matrix(rng, cfg.ffn_hidden(), cfg.d, out_scale / std::sqrt(static_cast<double>(cfg.ffn_hidden())));
    return e;
}

inline Tensor filled(std::size_t n, float v) { return Tensor({n}, std::vector<float>(n, v)); }

}  // namespace detail

// ------------------------------------------------------------------ routing

/// Stable partition of positions by modality. inverse[t] is the row of
/// position t inside the concatenation [text rows; vision rows].
struct Route {
    std::vector<std::size_t> text_rows;
    std::vector<std::size_t> vision_rows;
    std::vector<std::size_t> inverse;

    std::size_t size() const { return inverse.size(); }
    bool single_modality() const { return text_rows.empty() || vision_rows.empty(); }
};

inline Route route_tokens(std::span<const Modality> modality) {
    Route r;
    for (std::size_t t = 0; t < modality.size(); ++t) {
        switch (modality[t]) {
            case Modality::text: r.text_rows.push_back(t); break;
            case Modality::vision: r.vision_rows.push_back(t); break;
            default: throw ModalityError("unknown modality tag at position " + std::to_string(t));
        }
    }
    r.inverse.resize(modality.size());
    for (std::size_t i = 0; i < r.text_rows.size(); ++i) r.inverse[r.text_rows[i]] = i;
    for (std::size_t i = 0; i < r.vision_rows.size(); ++i) r.inverse[r.vision_rows[i]] = r.text_rows.size() + i;
    return r;
}

/// Sends the text rows of x through text_fn and the vision rows through
/// vision_fn, then restores the original row order.
template <class T, class TextFn, class VisionFn>
BasicTensor<T> apply_routed(const BasicTensor<T>& x, const Route& route, TextFn&& text_fn, VisionFn&& vision_fn) {
    if (x.rows() != route.size())
        throw DimensionError("routed input has " + std::to_string(x.rows()) + " rows for " +
                             std::to_string(route.size()) + " positions");
    // one modality: the partition is the identity permutation
    if (route.vision_rows.empty()) return text_fn(x);
    if (route.text_rows.empty()) return vision_fn(x);
    BasicTensor<T> t = text_fn(gather_rows(x, route.text_rows));
    BasicTensor<T> v = vision_fn(gather_rows(x, route.vision_rows));
    return gather_rows(concat_rows<T>({t, v}), route.inverse);
}

// ------------------------------------------------------------------ blocks

template <class T>
const BasicExpertParams<T>& vision_or_fail(const BasicLayerParams<T>& layer) {
    if (!layer.vision.defined()) throw ModalityError("vision token routed to a layer without a vision expert");
    return layer.vision;
}

/// LN → route → per-expert Q/K/V → shared causal attention → per-expert
/// output projection → residual.
template <class T>
BasicTensor<T> attention_moe_forward(const BasicTensor<T>& r, const Route& route, const BasicLayerParams<T>& layer,
                                     std::size_t heads) {
    const BasicTensor<T> a = layer_norm(r, layer.ln1_gamma, layer.ln1_beta, T(kLayerNormEps));
    auto proj = [&](BasicTensor<T> BasicExpertParams<T>::*w) {
        return apply_routed(
            a, route, [&](const BasicTensor<T>& x) { return matmul(x, layer.text.*w); },
            [&](const BasicTensor<T>& x) { return matmul(x, vision_or_fail(layer).*w); });
    };
    const BasicTensor<T> q = proj(&BasicExpertParams<T>::wq);
    const BasicTensor<T> k = proj(&BasicExpertParams<T>::wk);
    const BasicTensor<T> v = proj(&BasicExpertParams<T>::wv);
    const BasicTensor<T> att = causal_attention(q, k, v, heads);
    const BasicTensor<T> o = apply_routed(
        att, route, [&](const BasicTensor<T>& x) { return matmul(x, layer.text.wo); },
        [&](const BasicTensor<T>& x) { return matmul(x, vision_or_fail(layer).wo); });
    return add(o, r);
}

template <class T>
BasicTensor<T> expert_ffn(const BasicTensor<T>& x, const BasicExpertParams<T>& e) { return matmul(gelu(matmul(x, e.w1)), e.w2); }

/// LN → route → FFN^t / FFN^v → residual.
template <class T>
BasicTensor<T> ffn_moe_forward(const BasicTensor<T>& r, const Route& route, const BasicLayerParams<T>& layer) {
    const BasicTensor<T> f = layer_norm(r, layer.ln2_gamma, layer.ln2_beta, T(kLayerNormEps));
    const BasicTensor<T> h = apply_routed(
        f, route, [&](const BasicTensor<T>& x) { return expert_ffn(x, layer.text); },
        [&](const BasicTensor<T>& x) { return expert_ffn(x, vision_or_fail(layer)); });
    return add(h, r);
}

template <class T>
BasicTensor<T> semvie_layer_forward(const BasicTensor<T>& r, const Route& route, const BasicLayerParams<T>& layer,
                                    std::size_t heads) {
    return ffn_moe_forward(attention_moe_forward(r, route, layer, heads), route, layer);
}

inline LayerParams random_layer(Rng& rng, const ModelConfig& cfg) {
    LayerParams l;
    l.ln1_gamma = detail::filled(cfg.d, 1.0f);
    l.ln1_beta = detail::filled(cfg.d, 0.0f);
    l.ln2_gamma = detail::filled(cfg.d, 1.0f);
    l.ln2_beta = detail::filled(cfg.d, 0.0f);
    l.text = detail::random_expert(rng, cfg);
    return l;
}

// ------------------------------------------------------------------ donor LM

/// Plain causal byte-level LM over bytes plus the special ids. Its weights
/// seed and then freeze the text path of a SemVieModel.
class TextLm {
public:
    ModelConfig config;
    Tensor embed;  // text_vocab × d
    Tensor pos;    // context × d
    std::vector<LayerParams> layers;
    Tensor final_gamma, final_beta;
    Tensor head;  // d × text_vocab

    static TextLm init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        TextLm lm;
        lm.config = cfg;
        lm.embed = detail::random_matrix(rng, cfg.text_vocab(), cfg.d, 0.1);
        lm.pos = detail::random_matrix(rng, cfg.context, cfg.d, 0.02);
        for (std::size_t i = 0; i < cfg.layers; ++i) lm.layers.push_back(random_layer(rng, cfg));
        lm.final_gamma = detail::filled(cfg.d, 1.0f);
        lm.final_beta = detail::filled(cfg.d, 0.0f);
        lm.head = detail::random_matrix(rng, cfg.d, cfg.text_vocab(), 1.0 / std::sqrt(static_cast<double>(cfg.d)));
        return lm;
    }

    std::vector<NamedTensor> named_parameters() const {
        std::vector<NamedTensor> out;
        out.emplace_back("embed", embed);
        out.emplace_back("pos", pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layers." + std::to_string(i);
            out.emplace_back(p + ".ln1.gamma", layers[i].ln1_gamma);
            out.emplace_back(p + ".ln1.beta", layers[i].ln1_beta);
            out.emplace_back(p + ".ln2.gamma", layers[i].ln2_gamma);
            out.emplace_back(p + ".ln2.beta", layers[i].ln2_beta);
            layers[i].text.append_named(p + ".text", out);
        }
        out.emplace_back("final.gamma", final_gamma);
        out.emplace_back("final.beta", final_beta);
        out.emplace_back("head", head);
        return out;
    }

    void set_trainable(bool on) {
        for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
    }

    Tensor hidden(std::span<const TokenId> ids) const {
        if (ids.empty()) throw DimensionError("empty input sequence");
        if (ids.size() > config.context)
            throw ContextLengthError("sequence of " + std::to_string(ids.size()) + " exceeds context " +
                                     std::to_string(config.context));
        std::vector<std::size_t> rows(ids.begin(), ids.end()), positions(ids.size());
        for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] >= config.text_vocab()) throw RangeError("id " + std::to_string(ids[t]) + " outside the text vocabulary");
            positions[t] = t;
        }
        Tensor x = add(gather_rows(embed, std::move(rows)), gather_rows(pos, std::move(positions)));
        const Route route = route_tokens(std::vector<Modality>(ids.size(), Modality::text));
        for (const auto& layer : layers) x = semvie_layer_forward(x, route, layer, config.heads);
        return layer_norm(x, final_gamma, final_beta, kLayerNormEps);
    }

    Tensor logits(std::span<const TokenId> ids) const { return matmul(hidden(ids), head); }
};

// ------------------------------------------------------------------ SemVIE

/// Routed transformer over the merged vocabulary. Text-side parameters come
/// from the donor and stay frozen; the vision expert, the visual and special
/// embeddings and the vision head(s) train.
template <class T>
class BasicSemVieModel {
public:
    ModelConfig config;
    MultimodalVocab vocab;
    BasicTensor<T> embed_text;     // text_size × d, frozen
    BasicTensor<T> embed_special;  // 6 × d
    BasicTensor<T> embed_visual;   // C × d
    BasicTensor<T> pos;            // context × d, frozen
    std::vector<BasicLayerParams<T>> layers;
    BasicTensor<T> final_gamma, final_beta;  // frozen
    BasicTensor<T> head_text;                // d × (text_size + 6), frozen
    std::vector<BasicTensor<T>> head_vision; // K × (d × C); K > 1 only for the super-resolution cascade
    std::vector<std::string> provenance;

    const VocabLayout& layout() const { return vocab.layout; }
    std::size_t block_k() const { return head_vision.size(); }
    std::size_t total_vocab() const { return layout().total_size(); }

    std::vector<BasicNamedTensor<T>> named_parameters() const {
        std::vector<BasicNamedTensor<T>> out;
        out.emplace_back("embed.text", embed_text);
        out.emplace_back("embed.special", embed_special);
        out.emplace_back("embed.visual", embed_visual);
        out.emplace_back("pos", pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layers." + std::to_string(i);
            out.emplace_back(p + ".ln1.gamma", layers[i].ln1_gamma);
            out.emplace_back(p + ".ln1.beta", layers[i].ln1_beta);
            out.emplace_back(p + ".ln2.gamma", layers[i].ln2_gamma);
            out.emplace_back(p + ".ln2.beta", layers[i].ln2_beta);
            layers[i].text.append_named(p + ".text", out);
            layers[i].vision.append_named(p + ".vision", out);
        }
        out.emplace_back("final.gamma", final_gamma);
        out.emplace_back("final.beta", final_beta);
        out.emplace_back("head.text", head_text);
        for (std::size_t k = 0; k < head_vision.size(); ++k)
            out.emplace_back("head.vision." + std::to_string(k), head_vision[k]);
        return out;
    }

    std::vector<BasicNamedTensor<T>> trainable_parameters() const {
        std::vector<BasicNamedTensor<T>> out;
        for (auto& nt : named_parameters())
            if (nt.second.requires_grad()) out.push_back(nt);
        return out;
    }

    std::vector<BasicNamedTensor<T>> frozen_parameters() const {
        std::vector<BasicNamedTensor<T>> out;
        for (auto& nt : named_parameters())
            if (!nt.second.requires_grad()) out.push_back(nt);
        return out;
    }

    /// Final-norm hidden states, T × d.
    BasicTensor<T> hidden(const TokenSequence& seq) const {
        if (seq.size() == 0) throw DimensionError("empty input sequence");
        if (seq.size() > config.context)
            throw ContextLengthError("sequence of " + std::to_string(seq.size()) + " exceeds context " +
                                     std::to_string(config.context));
        seq.validate(layout());
        std::vector<std::size_t> rows(seq.ids.begin(), seq.ids.end()), positions(seq.size());
        for (std::size_t t = 0; t < seq.size(); ++t) positions[t] = t;
        const BasicTensor<T> table = concat_rows<T>({embed_text, embed_special, embed_visual});
        BasicTensor<T> x = add(gather_rows(table, std::move(rows)), gather_rows(pos, std::move(positions)));
        const Route route = route_tokens(seq.modality);
        for (const auto& layer : layers) x = semvie_layer_forward(x, route, layer, config.heads);
        return layer_norm(x, final_gamma, final_beta, T(kLayerNormEps));
    }

    /// Both heads on every row, concatenated in id order: [text+special | visual].
    BasicTensor<T> logits(const BasicTensor<T>& hidden, std::size_t head = 0) const {
        if (head >= head_vision.size()) throw IndexError("vision head " + std::to_string(head) + " does not exist");
        return concat_cols(matmul(hidden, head_text), matmul(hidden, head_vision[head]));
    }

    BasicTensor<T> forward(const TokenSequence& seq) const { return logits(hidden(seq), 0); }

    /// Same model in another scalar type; trainable flags carry over.
    template <class S>
    BasicSemVieModel<S> cast() const {
        BasicSemVieModel<S> m;
        m.config = config;
        m.vocab = vocab;
        m.embed_text = embed_text.template cast<S>();
        m.embed_special = embed_special.template cast<S>();
        m.embed_visual = embed_visual.template cast<S>();
        m.pos = pos.template cast<S>();
        for (const auto& l : layers) m.layers.push_back(l.template cast<S>());
        m.final_gamma = final_gamma.template cast<S>();
        m.final_beta = final_beta.template cast<S>();
        m.head_text = head_text.template cast<S>();
        for (const auto& h : head_vision) m.head_vision.push_back(h.template cast<S>());
        m.provenance = provenance;
        return m;
    }

    /// Adds K−1 block heads, each a trainable copy of the ordinary vision head.
    void set_block_heads(std::size_t k) {
        if (k == 0) throw ConfigError("block head count must be at least 1");
        head_vision.resize(1);
        for (std::size_t i = 1; i < k; ++i) head_vision.push_back(head_vision[0].clone(true));
    }
};

using SemVieModel = BasicSemVieModel<float>;

/// Builds a SemVIE model around a trained donor: the text path is copied and
/// frozen, the vision expert starts as a trainable copy of the text expert,
/// the vision head is freshly seeded and the visual embeddings start at the
/// mean text embedding.
inline SemVieModel init_from_text_lm(const TextLm& donor, const VisualCodebook& codebook, const ModelConfig& cfg,
                                     std::uint64_t seed) {
    cfg.validate();
    if (!(donor.config == cfg))
        throw ConfigError("donor geometry (d=" + std::to_string(donor.config.d) + ", heads=" +
                          std::to_string(donor.config.heads) + ", layers=" + std::to_string(donor.config.layers) +
                          ") does not match the requested model (d=" + std::to_string(cfg.d) + ", heads=" +
                          std::to_string(cfg.heads) + ", layers=" + std::to_string(cfg.layers) + ")");
    const std::size_t d = cfg.d;
    // the donor's byte rows are the text embeddings; specials are re-initialised
    std::vector<float> text_rows(donor.embed.data().begin(), donor.embed.data().begin() + cfg.text_size * d);
    SemVieModel m;
    m.config = cfg;
    m.vocab = build_multimodal_vocab(cfg.text_size, {default_special_names().begin(), default_special_names().end()},
                                     codebook, d, text_rows);
    const auto& table = m.vocab.embedding;
    const std::size_t c = codebook.size;
    m.embed_text = Tensor({cfg.text_size, d}, std::move(text_rows));
    m.embed_special = Tensor({kSpecialCount, d},
                             std::vector<float>(table.begin() + cfg.text_size * d, table.begin() + cfg.text_vocab() * d),
                             true);
    m.embed_visual = Tensor({c, d}, std::vector<float>(table.begin() + cfg.text_vocab() * d, table.end()), true);
    m.pos = donor.pos.clone();
    for (const auto& dl : donor.layers) {
        LayerParams l;
        l.ln1_gamma = dl.ln1_gamma.clone();
        l.ln1_beta = dl.ln1_beta.clone();
        l.ln2_gamma = dl.ln2_gamma.clone();
        l.ln2_beta = dl.ln2_beta.clone();
        l.text = dl.text.clone(false);
        l.vision = dl.text.clone(true);
        m.layers.push_back(std::move(l));
    }
    m.final_gamma = donor.final_gamma.clone();
    m.final_beta = donor.final_beta.clone();
    m.head_text = donor.head.clone();
    Rng rng(seed);
    m.head_vision.push_back(detail::random_matrix(rng, d, c, 0.02));
    m.head_vision[0].set_requires_grad(true);
    return m;
}

// ------------------------------------------------------------------ decoding

/// KV-cached single-position forward pass for generation. Uses the same
/// kernels and accumulation order as SemVieModel::hidden, so the hidden state
/// of position t equals row t of the full forward pass exactly.
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const SemVieModel& model) : model_(model) {
        const auto& cfg = model.config;
        keys_.assign(cfg.layers, std::vector<float>(cfg.context * cfg.d));
        values_.assign(cfg.layers, std::vector<float>(cfg.context * cfg.d));
        hidden_.assign(cfg.d, 0.0f);
    }

    std::size_t length() const { return len_; }
    std::span<const float> last_hidden() const { return hidden_; }

    void push(TokenId id) {
        const auto& cfg = model_.config;
        const auto& lay = model_.layout();
        if (len_ >= cfg.context)
            throw ContextLengthError("generation exceeds context " + std::to_string(cfg.context));
        const Modality mod = lay.modality_of(id);
        const std::size_t d = cfg.d, hid = cfg.ffn_hidden();
        std::vector<float> x(d), a(d), q(d), att(d), o(d), h1(hid), h2(d);
        const float* emb = embedding_row(id);
        const float* p = model_.pos.row(len_);
        for (std::size_t j = 0; j < d; ++j) x[j] = emb[j] + p[j];
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const LayerParams& layer = model_.layers[l];
            const ExpertParams& e = mod == Modality::text ? layer.text : vision_or_fail(layer);
            kernels::layer_norm_row(x.data(), layer.ln1_gamma.data().data(), layer.ln1_beta.data().data(),
                                    kLayerNormEps, d, a.data());
            float* kc = keys_[l].data() + len_ * d;
            float* vc = values_[l].data() + len_ * d;
            kernels::matmul(a.data(), e.wq.data().data(), q.data(), 1, d, d);
            kernels::matmul(a.data(), e.wk.data().data(), kc, 1, d, d);
            kernels::matmul(a.data(), e.wv.data().data(), vc, 1, d, d);
            kernels::attention_row(q.data(), keys_[l].data(), values_[l].data(), len_ + 1, d, cfg.heads, att.data());
            kernels::matmul(att.data(), e.wo.data().data(), o.data(), 1, d, d);
            for (std::size_t j = 0; j < d; ++j) x[j] = o[j] + x[j];
            kernels::layer_norm_row(x.data(), layer.ln2_gamma.data().data(), layer.ln2_beta.data().data(),
                                    kLayerNormEps, d, a.data());
            kernels::matmul(a.data(), e.w1.data().data(), h1.data(), 1, d, hid);
            for (float& v : h1) v = kernels::gelu(v);
            kernels::matmul(h1.data(), e.w2.data().data(), h2.data(), 1, hid, d);
            for (std::size_t j = 0; j < d; ++j) x[j] = h2[j] + x[j];
        }
        kernels::layer_norm_row(x.data(), model_.final_gamma.data().data(), model_.final_beta.data().data(),
                                kLayerNormEps, d, hidden_.data());
        ++len_;
    }

    void push(std::span<const TokenId> ids) {
        for (TokenId id : ids) push(id);
    }

    /// Full-width logits of the last pushed position through vision head k.
    std::vector<float> logits(std::size_t head = 0) const {
        if (len_ == 0) throw DecodeError("no position decoded yet");
        if (head >= model_.head_vision.size()) throw IndexError("vision head " + std::to_string(head) + " does not exist");
        const auto& cfg = model_.config;
        const std::size_t nt = cfg.text_vocab(), nv = model_.layout().visual_size;
        std::vector<float> out(nt + nv);
        kernels::matmul(hidden_.data(), model_.head_text.data().data(), out.data(), 1, cfg.d, nt);
        kernels::matmul(hidden_.data(), model_.head_vision[head].data().data(), out.data() + nt, 1, cfg.d, nv);
        return out;
    }

private:
    const float* embedding_row(TokenId id) const {
        const auto& lay = model_.layout();
        if (id < lay.text_size) return model_.embed_text.row(id);
        if (id < lay.text_end()) return model_.embed_special.row(id - lay.text_size);
        return model_.embed_visual.row(id - lay.visual_begin());
    }

    const SemVieModel& model_;
    std::vector<std::vector<float>> keys_, values_;
    std::vector<float> hidden_;
    std::size_t len_ = 0;
};

}  // namespace mars

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mars/model.hpp"

namespace mars {

// ------------------------------------------------------------ sequence layouts

enum class Supervision {
    all,         // every position after the first
    image_only,  // the target image span only
};

/// Appends tokens to a TokenSequence with modality tags derived from the
/// vocabulary layout.
class SequenceBuilder {
public:
    explicit SequenceBuilder(const VocabLayout& layout) : layout_(layout) {}

    SequenceBuilder& special(Special s, bool supervised) {
        push(layout_.special(s), supervised);
        return *this;
    }

    SequenceBuilder& text(std::string_view s, bool supervised) {
        for (TokenId id : encode_text(s)) push(id, supervised);
        return *this;
    }

    SequenceBuilder& image(const TokenGrid& grid, bool supervised) {
        for (std::uint32_t c : grid.codes) push(layout_.visual_id(c), supervised);
        return *this;
    }

    // "<res> h w" followed by <sep>
    SequenceBuilder& resolution(std::size_t h, std::size_t w, bool supervised) {
        text(resolution_tag(h, w), supervised);
        return special(Special::sep, supervised);
    }

    TokenSequence build() && { return std::move(seq_); }
    const TokenSequence& current() const { return seq_; }

    static std::string resolution_tag(std::size_t h, std::size_t w) {
        return "<res> " + std::to_string(h) + " " + std::to_string(w);
    }

private:
    void push(TokenId id, bool supervised) {
        // the first token is never a prediction target
        seq_.push(id, layout_.modality_of(id), supervised && !seq_.ids.empty());
    }

    const VocabLayout& layout_;
    TokenSequence seq_;
};

/// <bos> <res> h w <sep> caption <boi>
inline TokenSequence t2i_prompt(const VocabLayout& layout, std::string_view caption, std::size_t h, std::size_t w) {
    SequenceBuilder b(layout);
    b.special(Special::bos, false).resolution(h, w, false).text(caption, false).special(Special::boi, false);
    return std::move(b).build();
}

/// <bos> <res> h w <sep> caption <boi> image <eoi> <eos>
inline TokenSequence t2i_sequence(const VocabLayout& layout, std::string_view caption, std::size_t h, std::size_t w,
                                  const TokenGrid& image, Supervision sup) {
    const bool all = sup == Supervision::all;
    SequenceBuilder b(layout);
    b.special(Special::bos, all).resolution(h, w, all).text(caption, all).special(Special::boi, all);
    b.image(image, true).special(Special::eoi, all).special(Special::eos, all);
    return std::move(b).build();
}

/// <bos> <boi> image <eoi> <sep> caption <eos>
inline TokenSequence caption_sequence(const VocabLayout& layout, const TokenGrid& image, std::string_view caption,
                                      Supervision sup) {
    const bool all = sup == Supervision::all;
    SequenceBuilder b(layout);
    b.special(Special::bos, all).special(Special::boi, all).image(image, all).special(Special::eoi, all);
    b.special(Special::sep, all).text(caption, true).special(Special::eos, true);
    return std::move(b).build();
}

/// <bos> <res> h' w' <sep> caption <boi> low <eoi> <sep> <boi>
inline TokenSequence superres_prompt(const VocabLayout& layout, std::string_view caption, const TokenGrid& low,
                                     std::size_t hi_h, std::size_t hi_w) {
    SequenceBuilder b(layout);
    b.special(Special::bos, false).resolution(hi_h, hi_w, false).text(caption, false).special(Special::boi, false);
    b.image(low, false).special(Special::eoi, false).special(Special::sep, false).special(Special::boi, false);
    return std::move(b).build();
}

/// superres_prompt followed by the high-resolution span and <eoi>.
inline TokenSequence superres_sequence(const VocabLayout& layout, std::string_view caption, const TokenGrid& low,
                                       const TokenGrid& high, std::size_t patch, Supervision sup) {
    const bool all = sup == Supervision::all;
    SequenceBuilder b(layout);
    b.special(Special::bos, all).resolution(high.grid_h * patch, high.grid_w * patch, all).text(caption, all);
    b.special(Special::boi, all).image(low, all).special(Special::eoi, all).special(Special::sep, all);
    b.special(Special::boi, all).image(high, true).special(Special::eoi, all);
    return std::move(b).build();
}

// ------------------------------------------------------------ losses

template <class T>
struct BasicLossResult {
    BasicTensor<T> total;   // summed negative log-likelihood
    std::size_t count = 0;  // supervised targets
    std::size_t steps = 0;  // auto-regressive predictions (blocks)

    BasicTensor<T> per_token() const { return scale(total, T(1) / static_cast<T>(count)); }
};

using LossResult = BasicLossResult<float>;

/// Σ CE over rows `anchors` of the hidden states through vision head `head`.
template <class T>
BasicTensor<T> head_loss(const BasicSemVieModel<T>& model, const BasicTensor<T>& hidden, std::vector<std::size_t> anchors,
                        const std::vector<std::int64_t>& targets, std::size_t head) {
    const BasicTensor<T> logits = model.logits(gather_rows(hidden, std::move(anchors)), head);
    return cross_entropy_rows(logits, targets);
}

/// Next-token NLL over positions whose loss_mask is set, using the combined
/// text+visual softmax.
template <class T>
BasicLossResult<T> ntp_loss(const BasicSemVieModel<T>& model, const TokenSequence& seq) {
    if (seq.size() < 2) throw DimensionError("ntp_loss needs at least two tokens");
    std::vector<std::size_t> anchors;
    std::vector<std::int64_t> targets;
    for (std::size_t t = 1; t < seq.size(); ++t) {
        if (!seq.loss_mask[t]) continue;
        anchors.push_back(t - 1);
        targets.push_back(seq.ids[t]);
    }
    if (anchors.empty()) throw EmptyLossError("every target in the sequence is masked");
    const BasicTensor<T> hidden = model.hidden(seq);
    BasicLossResult<T> r;
    r.count = anchors.size();
    r.steps = anchors.size();
    r.total = head_loss(model, hidden, std::move(anchors), targets, 0);
    return r;
}

/// Next-K-token NLL. Each maximal run of supervised positions is cut into
/// blocks of K; the position before a block predicts all K of its tokens at
/// once, offset k through vision head k, independently given the prefix.
template <class T>
BasicLossResult<T> nktp_loss(const BasicSemVieModel<T>& model, const TokenSequence& seq, std::size_t k) {
    if (k == 0) throw BlockGeometryError("K must be at least 1");
    if (k > model.block_k())
        throw ConfigError("model has " + std::to_string(model.block_k()) + " block heads, K=" + std::to_string(k));
    if (seq.size() < 2) throw DimensionError("nktp_loss needs at least two tokens");
    std::vector<std::size_t> anchors;
    std::vector<std::vector<std::int64_t>> targets(k);
    std::size_t t = 1;
    while (t < seq.size()) {
        if (!seq.loss_mask[t]) {
            ++t;
            continue;
        }
        std::size_t end = t;
        while (end < seq.size() && seq.loss_mask[end]) ++end;
        if ((end - t) % k != 0)
            throw BlockGeometryError("supervised span of " + std::to_string(end - t) + " tokens is not a multiple of K=" +
                                     std::to_string(k));
        for (std::size_t s = t; s < end; s += k) {
            anchors.push_back(s - 1);
            for (std::size_t j = 0; j < k; ++j) targets[j].push_back(seq.ids[s + j]);
        }
        t = end;
    }
    if (anchors.empty()) throw EmptyLossError("every target in the sequence is masked");
    const BasicTensor<T> hidden = model.hidden(seq);
    BasicLossResult<T> r;
    r.steps = anchors.size();
    r.count = anchors.size() * k;
    r.total = head_loss(model, hidden, anchors, targets[0], 0);
    for (std::size_t j = 1; j < k; ++j) r.total = add(r.total, head_loss(model, hidden, anchors, targets[j], j));
    return r;
}

// ------------------------------------------------------------ sampling

struct DecodeParams {
    float temperature = 1.0f;  // 0 selects greedy decoding
    std::optional<std::size_t> top_k;
    std::uint64_t seed = 0;
    std::size_t max_text_len = 64;

    static DecodeParams greedy() { return DecodeParams{0.0f, std::nullopt, 0, 64}; }

    void validate() const {
        if (!(temperature >= 0.0f) || !std::isfinite(temperature))
            throw ConfigError("temperature must be a non-negative finite number");
        if (top_k && *top_k == 0) throw ConfigError("top_k must be at least 1");
    }
};

/// Half-open id range a draw is restricted to.
struct IdRange {
    std::size_t lo = 0;
    std::size_t hi = 0;
};

inline std::size_t argmax(std::span<const float> x, std::size_t lo, std::size_t hi) {
    std::size_t best = lo;
    for (std::size_t i = lo + 1; i < hi; ++i)
        if (x[i] > x[best]) best = i;
    return best;
}

/// Draws the next id from one logits row: optional range filter, temperature,
/// top-k, then a draw from the renormalised distribution.
inline TokenId sample_next_token(std::span<const float> logits, const DecodeParams& params,
                                 std::optional<IdRange> filter, Rng& rng) {
    params.validate();
    for (float v : logits)
        if (!std::isfinite(v)) throw NumericError("sample_next_token: non-finite logit");
    const std::size_t lo = filter ? filter->lo : 0;
    const std::size_t hi = filter ? std::min(filter->hi, logits.size()) : logits.size();
    if (lo >= hi) throw DecodeError("sample_next_token: no id is allowed");
    if (params.temperature == 0.0f) return static_cast<TokenId>(argmax(logits, lo, hi));

    std::vector<std::size_t> cand(hi - lo);
    for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = lo + i;
    if (params.top_k && *params.top_k < cand.size()) {
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(*params.top_k), cand.end(),
                          [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
        cand.resize(*params.top_k);
        std::sort(cand.begin(), cand.end());
    }
    double mx = -INFINITY;
    for (std::size_t i : cand) mx = std::max(mx, static_cast<double>(logits[i]) / params.temperature);
    std::vector<double> w(cand.size());
    double sum = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        w[i] = std::exp(static_cast<double>(logits[cand[i]]) / params.temperature - mx);
        sum += w[i];
    }
    const double u = rng.uniform() * sum;
    double acc = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        acc += w[i];
        if (u < acc) return static_cast<TokenId>(cand[i]);
    }
    return static_cast<TokenId>(cand.back());
}

inline TokenId sample_next_token(std::span<const float> logits, const DecodeParams& params,
                                 std::optional<IdRange> filter = std::nullopt) {
    Rng rng(params.seed);
    return sample_next_token(logits, params, filter, rng);
}

inline IdRange visual_range(const VocabLayout& l) { return {l.visual_begin(), l.total_size()}; }
inline IdRange text_range(const VocabLayout& l) { return {0, l.text_end()}; }

// ------------------------------------------------------------ generation

struct GeneratedImage {
    TokenSequence sequence;
    TokenGrid grid;
    Image image;
};

/// Text-to-image: prompt with resolution tag, then exactly (h/P)·(w/P)
/// visual tokens, then <eoi>.
inline GeneratedImage generate_image(const SemVieModel& model, std::string_view prompt, std::size_t h, std::size_t w,
                                     const DecodeParams& params) {
    params.validate();
    const auto& lay = model.layout();
    const std::size_t p = model.vocab.codebook.patch_size;
    check_divisible(h, w, p);
    GeneratedImage out;
    out.sequence = t2i_prompt(lay, prompt, h, w);
    out.grid.grid_h = h / p;
    out.grid.grid_w = w / p;
    const std::size_t n = out.grid.grid_h * out.grid.grid_w;
    if (out.sequence.size() + n + 1 > model.config.context)
        throw ContextLengthError("a " + std::to_string(w) + "x" + std::to_string(h) + " image needs " +
                                 std::to_string(out.sequence.size() + n + 1) + " positions, context is " +
                                 std::to_string(model.config.context));
    IncrementalDecoder dec(model);
    dec.push(out.sequence.ids);
    Rng rng(params.seed);
    for (std::size_t i = 0; i < n; ++i) {
        const TokenId id = sample_next_token(dec.logits(0), params, visual_range(lay), rng);
        out.sequence.push(id, Modality::vision, false);
        out.grid.codes.push_back(lay.code_of(id));
        if (i + 1 < n) dec.push(id);
    }
    out.sequence.push(lay.special(Special::eoi), Modality::text, false);
    out.image = dequantize_tokens(out.grid.codes, model.vocab.codebook, out.grid.grid_h, out.grid.grid_w);
    return out;
}

/// Image captioning: <bos> <boi> image <eoi> <sep>, then text-range tokens
/// until <eos> or max_text_len.
inline std::string generate_caption(const SemVieModel& model, const Image& image, const DecodeParams& params) {
    params.validate();
    const auto& lay = model.layout();
    const TokenGrid grid = quantize_image(image, model.vocab.codebook);
    SequenceBuilder b(lay);
    b.special(Special::bos, false).special(Special::boi, false).image(grid, false);
    b.special(Special::eoi, false).special(Special::sep, false);
    const TokenSequence prompt = std::move(b).build();
    if (prompt.size() >= model.config.context) throw ContextLengthError("image does not fit the context");
    IncrementalDecoder dec(model);
    dec.push(prompt.ids);
    Rng rng(params.seed);
    std::vector<TokenId> bytes;
    for (std::size_t i = 0; i < params.max_text_len; ++i) {
        const TokenId id = sample_next_token(dec.logits(0), params, text_range(lay), rng);
        if (id == lay.special(Special::eos)) break;
        if (id < lay.text_size) bytes.push_back(id);
        if (dec.length() >= model.config.context) break;
        dec.push(id);
    }
    return decode_text(bytes);
}

/// High-resolution geometry for a low-resolution image: the long side
/// becomes long_side, the short side keeps the aspect ratio and is rounded
/// to a whole number of patches.
inline std::pair<std::size_t, std::size_t> superres_geometry(std::size_t h, std::size_t w, std::size_t long_side,
                                                             std::size_t patch) {
    const double s = static_cast<double>(long_side) / static_cast<double>(std::max(h, w));
    auto fit = [&](std::size_t v) {
        const auto cells = static_cast<std::size_t>(std::lround(static_cast<double>(v) * s / static_cast<double>(patch)));
        return std::max<std::size_t>(1, cells) * patch;
    };
    return {fit(h), fit(w)};
}

/// Cascade decoding: each step the last position emits K visual tokens
/// through the K block heads.
inline TokenGrid super_resolve(const SemVieModel& model, const TokenGrid& low, std::string_view caption, std::size_t k,
                               const DecodeParams& params, std::size_t long_side = 64) {
    params.validate();
    const auto& lay = model.layout();
    const std::size_t p = model.vocab.codebook.patch_size;
    if (k == 0) throw BlockGeometryError("K must be at least 1");
    if (k > model.block_k())
        throw ConfigError("model has " + std::to_string(model.block_k()) + " block heads, K=" + std::to_string(k));
    const auto [hh, hw] = superres_geometry(low.grid_h * p, low.grid_w * p, long_side, p);
    TokenGrid hi{hh / p, hw / p, {}};
    const std::size_t n = hi.grid_h * hi.grid_w;
    if (n % k != 0)
        throw BlockGeometryError("high-resolution grid of " + std::to_string(n) + " tokens is not divisible by K=" +
                                 std::to_string(k));
    const TokenSequence prompt = superres_prompt(lay, caption, low, hh, hw);
    if (prompt.size() + n + 1 > model.config.context)
        throw ContextLengthError("super-resolution sequence needs " + std::to_string(prompt.size() + n + 1) +
                                 " positions, context is " + std::to_string(model.config.context));
    IncrementalDecoder dec(model);
    dec.push(prompt.ids);
    Rng rng(params.seed);
    for (std::size_t step = 0; step < n / k; ++step) {
        std::vector<TokenId> block;
        for (std::size_t j = 0; j < k; ++j) block.push_back(sample_next_token(dec.logits(j), params, visual_range(lay), rng));
        for (TokenId id : block) hi.codes.push_back(lay.code_of(id));
        if (step + 1 < n / k) dec.push(block);
    }
    return hi;
}

}  // namespace mars

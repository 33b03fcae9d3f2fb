#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mars/dataset.hpp"
#include "mars/grad_check.hpp"
#include "mars/kernels.hpp"
#include "mars/objectives.hpp"

namespace mars {

// ------------------------------------------------------------ pure text

namespace detail {

// Σ CE over consecutive windows of at most `context` ids; every id except the
// first of each window is a target. The softmax covers columns [0, hi).
template <class LogitsFn>
std::pair<double, std::size_t> windowed_text_nll(std::span<const TokenId> ids, std::size_t context, std::size_t hi,
                                                 LogitsFn&& logits_fn) {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + 1 < ids.size(); start += context) {
        const auto window = ids.subspan(start, std::min(context, ids.size() - start));
        if (window.size() < 2) break;
        std::vector<std::int64_t> targets(window.size(), -1);
        for (std::size_t t = 0; t + 1 < window.size(); ++t) targets[t] = window[t + 1];
        total += cross_entropy_rows(logits_fn(window), targets, 0, hi).item();
        count += window.size() - 1;
    }
    if (count == 0) throw DataError("text needs at least two bytes");
    return {total, count};
}

}  // namespace detail

/// Mean per-byte NLL of raw bytes (no specials) under the donor.
inline double text_byte_loss(const TextLm& lm, std::string_view text) {
    const auto ids = encode_text(text);
    const auto [total, count] = detail::windowed_text_nll(
        ids, lm.config.context, lm.config.text_vocab(), [&](std::span<const TokenId> w) { return lm.logits(w); });
    return total / static_cast<double>(count);
}

/// Same quantity for a SemVIE model, with the softmax over the text and
/// special columns only. Pure text touches only frozen parameters, so this
/// equals the donor's value exactly.
inline double text_byte_loss(const SemVieModel& m, std::string_view text) {
    const auto ids = encode_text(text);
    const auto& lay = m.layout();
    const auto [total, count] = detail::windowed_text_nll(ids, m.config.context, lay.text_end(),
                                                          [&](std::span<const TokenId> w) {
                                                              const auto seq = TokenSequence::from_ids(
                                                                  lay, std::vector<TokenId>(w.begin(), w.end()));
                                                              return matmul(m.hidden(seq), m.head_text);
                                                          });
    return total / static_cast<double>(count);
}

// ------------------------------------------------------------ perplexity

struct Perplexity {
    std::optional<double> text;    // absent when no text targets were scored
    std::optional<double> vision;
    std::size_t text_count = 0;
    std::size_t vision_count = 0;
};

/// exp(mean NLL) over the supervised positions of each sequence, split by
/// the modality of the target, under the combined softmax of head 0.
inline Perplexity eval_perplexity(const SemVieModel& model, const std::vector<TokenSequence>& seqs) {
    if (seqs.empty()) throw DataError("perplexity needs at least one sequence");
    double text_nll = 0, vision_nll = 0;
    Perplexity out;
    for (const TokenSequence& seq : seqs) {
        if (seq.size() < 2) continue;
        const Tensor logits = model.forward(seq);
        for (std::size_t t = 1; t < seq.size(); ++t) {
            if (!seq.loss_mask[t]) continue;
            const float* row = logits.row(t - 1);
            const double nll = kernels::log_sum_exp(row, 0, logits.cols()) - static_cast<double>(row[seq.ids[t]]);
            if (seq.modality[t] == Modality::vision) {
                vision_nll += nll;
                ++out.vision_count;
            } else {
                text_nll += nll;
                ++out.text_count;
            }
        }
    }
    if (out.text_count) out.text = std::exp(text_nll / static_cast<double>(out.text_count));
    if (out.vision_count) out.vision = std::exp(vision_nll / static_cast<double>(out.vision_count));
    return out;
}

// ------------------------------------------------------------ alignment

struct EvalReport {
    std::optional<double> text_perplexity;
    std::optional<double> vision_perplexity;
    std::optional<double> alignment;  // joint (shape, colour, position) accuracy
    std::optional<double> color;
    std::optional<double> shape;
    std::optional<double> position;
    std::size_t samples = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"event", "eval"},
            {"text_perplexity", opt(r.text_perplexity)},
            {"vision_perplexity", opt(r.vision_perplexity)},
            {"alignment_accuracy", opt(r.alignment)},
            {"color_accuracy", opt(r.color)},
            {"shape_accuracy", opt(r.shape)},
            {"position_accuracy", opt(r.position)},
            {"samples", r.samples}};
}

/// Scores attribute predictions of the oracle classifier against ground
/// truth. An image the oracle cannot classify counts as wrong everywhere.
struct AttributeScore {
    std::size_t joint = 0, color = 0, shape = 0, position = 0, n = 0;

    void add(const Attributes& truth, const std::optional<Attributes>& got) {
        ++n;
        if (!got) return;
        color += got->color == truth.color;
        shape += got->shape == truth.shape;
        position += got->position == truth.position;
        joint += *got == truth;
    }

    void fill(EvalReport& r) const {
        const auto d = static_cast<double>(n);
        r.alignment = static_cast<double>(joint) / d;
        r.color = static_cast<double>(color) / d;
        r.shape = static_cast<double>(shape) / d;
        r.position = static_cast<double>(position) / d;
        r.samples = n;
    }
};

/// Generates one image per prompt (seed params.seed + i), classifies it and
/// scores each attribute. Prompts must follow the caption grammar.
inline EvalReport eval_alignment_accuracy(const SemVieModel& model, const std::vector<std::string>& prompts,
                                          const DecodeParams& params, std::size_t height = StageGeometry::kMinSide,
                                          std::size_t width = StageGeometry::kMinSide) {
    if (prompts.empty()) throw DataError("alignment evaluation needs at least one prompt");
    std::vector<Attributes> truth;
    for (const auto& p : prompts) truth.push_back(parse_caption(p));
    AttributeScore score;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        DecodeParams pi = params;
        pi.seed = params.seed + i;
        const GeneratedImage g = generate_image(model, prompts[i], height, width, pi);
        score.add(truth[i], classify_image(g.image));
    }
    EvalReport r;
    score.fill(r);
    return r;
}

// ------------------------------------------------------------ gradient check

/// Reverse-mode gradients of ntp_loss for every trainable tensor, checked
/// against central differences of a 64-bit copy of the model.
inline GradCheckResult ntp_gradient_check(const SemVieModel& model, const TokenSequence& seq, double eps = 1e-4) {
    const auto wide = model.cast<double>();
    std::vector<Tensor> ps;
    std::vector<BasicTensor<double>> ws;
    for (const auto& [n, t] : model.trainable_parameters()) ps.push_back(t);
    for (const auto& [n, t] : wide.trainable_parameters()) ws.push_back(t);
    return grad_check_shadowed<float, double>([&] { return ntp_loss(model, seq).total; }, ps,
                                              [&] { return ntp_loss(wide, seq).total; }, ws, eps);
}

struct GradCheckFixture {
    SemVieModel model;
    TokenSequence sequence;
};

/// Random donor, random P=2 codebook of `visual` codes, trainable weights
/// perturbed off the copy-initialised point, and an n-token sequence that
/// alternates 3-token text and image spans.
inline GradCheckFixture gradcheck_fixture(const ModelConfig& cfg, std::size_t n, std::uint64_t seed,
                                          std::size_t visual = 16) {
    Rng rng(seed);
    VisualCodebook cb{2, visual, std::vector<float>(visual * 12)};
    for (float& v : cb.codewords) v = static_cast<float>(rng.uniform());
    GradCheckFixture f{init_from_text_lm(TextLm::init(cfg, seed + 1), cb, cfg, seed + 2), {}};
    for (auto& [name, t] : f.model.trainable_parameters()) {
        Tensor h = t;
        for (float& v : h.mutable_data()) v += static_cast<float>(rng.normal() * 0.05);
    }
    const auto& l = f.model.layout();
    std::vector<TokenId> ids{l.special(Special::bos)};
    while (ids.size() < n) {
        const bool vision = (ids.size() / 3) % 2 == 1;
        ids.push_back(vision ? static_cast<TokenId>(l.visual_begin() + rng.below(l.visual_size))
                             : static_cast<TokenId>(rng.below(l.text_end())));
    }
    f.sequence = TokenSequence::from_ids(l, ids);
    return f;
}

}  // namespace mars

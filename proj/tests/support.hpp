#pragma once

#include <vector>

#include "mars/model.hpp"
#include "mars/random.hpp"

namespace mars::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = false) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = static_cast<float>(rng.normal() * stddev);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline VisualCodebook random_codebook(Rng& rng, std::size_t patch, std::size_t size) {
    VisualCodebook cb{patch, size, std::vector<float>(size * 3 * patch * patch)};
    for (float& v : cb.codewords) v = static_cast<float>(rng.uniform());
    return cb;
}

inline ModelConfig tiny_config(std::size_t d = 8, std::size_t heads = 2, std::size_t layers = 2,
                               std::size_t context = 32) {
    ModelConfig c;
    c.d = d;
    c.heads = heads;
    c.layers = layers;
    c.context = context;
    return c;
}

/// Adds N(0, stddev²) noise to every trainable tensor, breaking the
/// copy-initialised symmetry between experts.
inline void jitter_trainable(SemVieModel& m, Rng& rng, double stddev = 0.05) {
    for (auto& [name, t] : m.trainable_parameters()) {
        Tensor h = t;
        for (float& v : h.mutable_data()) v += static_cast<float>(rng.normal() * stddev);
    }
}

/// Random donor, random codebook (P=2), SemVIE wrapper, optionally jittered.
inline SemVieModel tiny_model(const ModelConfig& cfg, std::uint64_t seed, std::size_t visual = 16, bool jitter = true) {
    Rng rng(seed);
    const TextLm donor = TextLm::init(cfg, seed + 1);
    SemVieModel m = init_from_text_lm(donor, random_codebook(rng, 2, visual), cfg, seed + 2);
    if (jitter) jitter_trainable(m, rng);
    return m;
}

/// Uniformly random ids over the whole vocabulary, <bos> first.
inline TokenSequence random_sequence(const VocabLayout& l, Rng& rng, std::size_t n) {
    std::vector<TokenId> ids{l.special(Special::bos)};
    while (ids.size() < n) ids.push_back(static_cast<TokenId>(rng.below(l.total_size())));
    return TokenSequence::from_ids(l, ids);
}

/// Alternating text and image spans so both experts see several positions.
inline TokenSequence mixed_sequence(const VocabLayout& l, Rng& rng, std::size_t n) {
    std::vector<TokenId> ids{l.special(Special::bos)};
    while (ids.size() < n) {
        const bool vision = (ids.size() / 3) % 2 == 1;
        ids.push_back(vision ? static_cast<TokenId>(l.visual_begin() + rng.below(l.visual_size))
                             : static_cast<TokenId>(rng.below(l.text_end())));
    }
    return TokenSequence::from_ids(l, ids);
}

}  // namespace mars::testing

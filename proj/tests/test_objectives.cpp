#include <gtest/gtest.h>

#include <cmath>

#include "mars/objectives.hpp"
#include "support.hpp"

using namespace mars;
using namespace mars::testing;

namespace {

// Both heads zeroed: every logit is 0 and the distribution is uniform.
SemVieModel uniform_model(std::size_t k = 1) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 2, 160), 1);
    m.set_block_heads(k);
    std::fill(m.head_text.mutable_data().begin(), m.head_text.mutable_data().end(), 0.0f);
    for (auto& h : m.head_vision) std::fill(h.mutable_data().begin(), h.mutable_data().end(), 0.0f);
    return m;
}

double cross_entropy(const float* row, std::size_t n, std::size_t target) {
    double mx = row[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double z = 0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(row[i] - mx);
    return std::log(z) + mx - row[target];
}

TokenGrid random_grid(Rng& rng, std::size_t gh, std::size_t gw, std::size_t c) {
    TokenGrid g{gh, gw, {}};
    for (std::size_t i = 0; i < gh * gw; ++i) g.codes.push_back(static_cast<std::uint32_t>(rng.below(c)));
    return g;
}

}  // namespace

TEST(Sequences, T2iLayout) {
    VocabLayout l;
    l.visual_size = 16;
    Rng rng(1);
    const auto grid = random_grid(rng, 2, 2, 16);
    const auto seq = t2i_sequence(l, "a red square", 16, 16, grid, Supervision::image_only);
    const std::string tag = "<res> 16 16";
    // bos, tag, sep, caption, boi, 4 image, eoi, eos
    ASSERT_EQ(seq.size(), 1 + tag.size() + 1 + 12 + 1 + 4 + 2);
    EXPECT_EQ(seq.ids.front(), l.special(Special::bos));
    EXPECT_EQ(seq.ids[1 + tag.size()], l.special(Special::sep));
    std::size_t supervised = 0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        if (!seq.loss_mask[t]) continue;
        ++supervised;
        EXPECT_EQ(seq.modality[t], Modality::vision);
    }
    EXPECT_EQ(supervised, 4u);
    EXPECT_NO_THROW(seq.validate(l));
}

TEST(Sequences, CaptionLayoutSupervisesAllButFirst) {
    VocabLayout l;
    l.visual_size = 16;
    Rng rng(2);
    const auto seq = caption_sequence(l, random_grid(rng, 2, 2, 16), "a blue circle", Supervision::all);
    EXPECT_FALSE(seq.loss_mask[0]);
    for (std::size_t t = 1; t < seq.size(); ++t) EXPECT_TRUE(seq.loss_mask[t]);
    EXPECT_EQ(seq.ids.back(), l.special(Special::eos));
}

TEST(NtpLoss, MatchesDirectSummation) {
    const SemVieModel m = tiny_model(tiny_config(8, 2, 2, 40), 3);
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        auto seq = mixed_sequence(m.layout(), rng, 40);
        for (std::size_t t = 1; t < seq.size(); ++t) seq.loss_mask[t] = rng.below(3) != 0;
        const auto r = ntp_loss(m, seq);
        const Tensor logits = m.forward(seq);
        double want = 0;
        std::size_t count = 0;
        for (std::size_t t = 1; t < seq.size(); ++t) {
            if (!seq.loss_mask[t]) continue;
            want += cross_entropy(logits.row(t - 1), logits.cols(), seq.ids[t]);
            ++count;
        }
        EXPECT_EQ(r.count, count);
        EXPECT_NEAR(r.total.item(), want, 1e-5 * want);
        EXPECT_NEAR(r.per_token().item(), want / static_cast<double>(count), 1e-5 * want / static_cast<double>(count));
    }
}

TEST(NtpLoss, UniformModelGivesLogVocab) {
    const SemVieModel m = uniform_model();
    Rng rng(5);
    const auto r = ntp_loss(m, random_sequence(m.layout(), rng, 30));
    EXPECT_NEAR(r.per_token().item(), std::log(static_cast<double>(m.total_vocab())), 1e-5);
}

TEST(NtpLoss, Errors) {
    const SemVieModel m = tiny_model(tiny_config(), 6);
    Rng rng(6);
    auto seq = random_sequence(m.layout(), rng, 8);
    std::fill(seq.loss_mask.begin(), seq.loss_mask.end(), false);
    EXPECT_THROW(ntp_loss(m, seq), EmptyLossError);
    EXPECT_THROW(ntp_loss(m, random_sequence(m.layout(), rng, 1)), DimensionError);
}

TEST(NktpLoss, KEqualsOneIsNtpBitForBit) {
    const SemVieModel m = tiny_model(tiny_config(8, 2, 2, 40), 7);
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto seq = mixed_sequence(m.layout(), rng, 10 + rng.below(30));
        EXPECT_EQ(nktp_loss(m, seq, 1).total.item(), ntp_loss(m, seq).total.item());
    }
}

TEST(NktpLoss, UniformBlockLoss) {
    for (std::size_t k : {1u, 2u, 4u}) {
        const SemVieModel m = uniform_model(k);
        Rng rng(9);
        const auto seq = t2i_sequence(m.layout(), "a red square", 32, 32, random_grid(rng, 4, 4, 16),
                                      Supervision::image_only);
        const auto r = nktp_loss(m, seq, k);
        EXPECT_EQ(r.steps, 16 / k);
        EXPECT_NEAR(r.total.item() / static_cast<double>(r.steps),
                    static_cast<double>(k) * std::log(static_cast<double>(m.total_vocab())), 1e-4);
    }
}

TEST(NktpLoss, SixtyFourTokensInSixteenSteps) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 1, 160), 10);
    m.set_block_heads(4);
    Rng rng(11);
    const auto seq = superres_sequence(m.layout(), "a cyan circle at the center", random_grid(rng, 4, 4, 16),
                                       random_grid(rng, 8, 8, 16), 8, Supervision::image_only);
    const auto r = nktp_loss(m, seq, 4);
    EXPECT_EQ(r.steps, 16u);
    EXPECT_EQ(r.count, 64u);
}

TEST(NktpLoss, BlockGeometry) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 1, 160), 12);
    m.set_block_heads(3);
    Rng rng(13);
    const auto seq = t2i_sequence(m.layout(), "x", 32, 32, random_grid(rng, 4, 4, 16), Supervision::image_only);
    EXPECT_THROW(nktp_loss(m, seq, 3), BlockGeometryError);
    EXPECT_THROW(nktp_loss(m, seq, 0), BlockGeometryError);
    EXPECT_THROW(nktp_loss(m, seq, 4), ConfigError);
}

TEST(NktpLoss, HeadJScoresOffsetJ) {
    // head j scores offset j of every block from the block's anchor
    SemVieModel m = tiny_model(tiny_config(8, 2, 1, 160), 14);
    m.set_block_heads(2);
    Rng rng(15);
    const auto seq = t2i_sequence(m.layout(), "y", 32, 32, random_grid(rng, 4, 4, 16), Supervision::image_only);
    const auto r = nktp_loss(m, seq, 2);
    const Tensor h = m.hidden(seq);
    const Tensor l0 = m.logits(h, 0), l1 = m.logits(h, 1);
    double want = 0;
    std::size_t first = 0;
    while (!seq.loss_mask[first]) ++first;
    for (std::size_t s = first; s < first + 16; s += 2) {
        want += cross_entropy(l0.row(s - 1), l0.cols(), seq.ids[s]);
        want += cross_entropy(l1.row(s - 1), l1.cols(), seq.ids[s + 1]);
    }
    EXPECT_NEAR(r.total.item(), want, 1e-5 * want);
}

TEST(LossMask, MaskedTargetsCarryNoGradient) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 2, 30), 16);
    Rng rng(17);
    auto seq = mixed_sequence(m.layout(), rng, 30);
    for (std::size_t t = 1; t < seq.size(); ++t) seq.loss_mask[t] = t % 3 != 0;
    auto grads = [&](const TokenSequence& s) {
        for (auto& [n, t] : m.trainable_parameters()) {
            Tensor h = t;
            h.zero_grad();
        }
        ntp_loss(m, s).total.backward();
        std::vector<float> out;
        for (const auto& [n, t] : m.trainable_parameters()) out.insert(out.end(), t.grad().begin(), t.grad().end());
        return out;
    };
    // the final token is only ever a target, never an input
    const std::size_t last = seq.size() - 1;
    seq.loss_mask[last] = false;
    const auto base = grads(seq);
    for (int trial = 0; trial < 5; ++trial) {
        auto other = seq;
        other.ids[last] = static_cast<TokenId>(rng.below(m.total_vocab()));
        other.modality[last] = m.layout().modality_of(other.ids[last]);
        EXPECT_EQ(grads(other), base);
    }
    auto unmasked = seq;
    unmasked.loss_mask[last] = true;
    EXPECT_NE(grads(unmasked), base);
}

TEST(Sampler, GreedyIsArgmax) {
    const std::vector<float> logits{0.1f, 2.0f, -1.0f, 2.0f, 0.5f};
    EXPECT_EQ(sample_next_token(logits, DecodeParams::greedy()), 1u);
    DecodeParams p;
    p.temperature = 0.0f;
    EXPECT_EQ(sample_next_token(logits, p, IdRange{2, 5}), 3u);
}

TEST(Sampler, TopOneIsGreedyAtAnyTemperature) {
    Rng rng(18);
    for (int i = 0; i < 1000; ++i) {
        std::vector<float> logits(50);
        for (float& v : logits) v = static_cast<float>(rng.normal() * 3.0);
        DecodeParams p;
        p.temperature = static_cast<float>(0.1 + rng.uniform() * 5.0);
        p.top_k = 1;
        p.seed = rng.next_u64();
        EXPECT_EQ(sample_next_token(logits, p), argmax(logits, 0, logits.size()));
    }
}

TEST(Sampler, FrequenciesMatchSoftmax) {
    const std::vector<float> logits{1.0f, 0.0f, -0.5f, 2.0f, 0.3f};
    const double temperature = 0.8;
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] / temperature));
    for (double& v : p) v /= z;
    DecodeParams params;
    params.temperature = static_cast<float>(temperature);
    Rng rng(19);
    const std::size_t n = 100000;
    std::vector<std::size_t> counts(p.size(), 0);
    for (std::size_t i = 0; i < n; ++i) ++counts[sample_next_token(logits, params, std::nullopt, rng)];
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double se = std::sqrt(p[i] * (1 - p[i]) / static_cast<double>(n));
        EXPECT_LT(std::abs(static_cast<double>(counts[i]) / n - p[i]), 3 * se) << "bin " << i;
    }
}

TEST(Sampler, TopKRestrictsSupport) {
    const std::vector<float> logits{3.0f, 2.0f, 1.0f, 0.0f};
    DecodeParams p;
    p.top_k = 2;
    Rng rng(20);
    for (int i = 0; i < 500; ++i) EXPECT_LT(sample_next_token(logits, p, std::nullopt, rng), 2u);
}

TEST(Sampler, FilterAndErrors) {
    const std::vector<float> logits{5.0f, 0.0f, 0.0f, 0.0f};
    DecodeParams p;
    Rng rng(21);
    for (int i = 0; i < 200; ++i) {
        const auto id = sample_next_token(logits, p, IdRange{1, 4}, rng);
        EXPECT_GE(id, 1u);
        EXPECT_LT(id, 4u);
    }
    EXPECT_THROW(sample_next_token(logits, p, IdRange{2, 2}, rng), DecodeError);
    const std::vector<float> bad{0.0f, NAN};
    EXPECT_THROW(sample_next_token(bad, p, std::nullopt, rng), NumericError);
    p.temperature = -1.0f;
    EXPECT_THROW(sample_next_token(logits, p, std::nullopt, rng), ConfigError);
}

TEST(Generate, ImageSpanLengthAndDeterminism) {
    const SemVieModel m = tiny_model(tiny_config(8, 2, 2, 160), 22, 16);
    DecodeParams p;
    p.seed = 99;
    const auto a = generate_image(m, "a red square at the center", 8, 8, p);
    const auto b = generate_image(m, "a red square at the center", 8, 8, p);
    EXPECT_EQ(a.grid.codes.size(), 16u);
    EXPECT_EQ(a.sequence.ids, b.sequence.ids);
    EXPECT_EQ(a.image, b.image);
    const auto& l = m.layout();
    const auto boi = std::find(a.sequence.ids.begin(), a.sequence.ids.end(), l.special(Special::boi));
    ASSERT_NE(boi, a.sequence.ids.end());
    const auto start = static_cast<std::size_t>(boi - a.sequence.ids.begin()) + 1;
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(a.sequence.modality[start + i], Modality::vision);
    EXPECT_EQ(a.sequence.ids[start + 16], l.special(Special::eoi));
    EXPECT_EQ(a.image.width, 8u);
    p.seed = 100;
    const auto c = generate_image(m, "a red square at the center", 8, 8, p);
    EXPECT_NE(c.sequence.ids, a.sequence.ids);
}

TEST(Generate, ImageErrors) {
    const SemVieModel m = tiny_model(tiny_config(8, 2, 1, 40), 23, 16);
    EXPECT_THROW(generate_image(m, "x", 9, 8, DecodeParams{}), GeometryError);
    EXPECT_THROW(generate_image(m, "x", 16, 16, DecodeParams{}), ContextLengthError);
}

TEST(Generate, CaptionStaysInTextRangeAndHalts) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 1, 160), 24, 16);
    Rng rng(25);
    DecodeParams p;
    p.max_text_len = 12;
    p.seed = 3;
    const Image img = dequantize_tokens(random_grid(rng, 2, 2, 16).codes, m.vocab.codebook, 2, 2);
    const std::string caption = generate_caption(m, img, p);
    EXPECT_LE(caption.size(), 12u);
    // hidden state pinned to e0 with <eos> dominant in row 0: generation stops at once
    const auto eos = m.layout().special(Special::eos);
    std::fill(m.final_gamma.mutable_data().begin(), m.final_gamma.mutable_data().end(), 0.0f);
    std::fill(m.final_beta.mutable_data().begin(), m.final_beta.mutable_data().end(), 0.0f);
    m.final_beta.mutable_data()[0] = 1.0f;
    for (std::size_t c = 0; c < m.config.text_vocab(); ++c) m.head_text.mutable_data()[c] = c == eos ? 50.0f : 0.0f;
    EXPECT_EQ(generate_caption(m, img, p), "");
}

TEST(SuperResolve, GeometryAndK1Reduction) {
    SemVieModel m = tiny_model(tiny_config(8, 2, 1, 160), 26, 16);
    m.set_block_heads(4);
    Rng rng(27);
    const TokenGrid low = random_grid(rng, 4, 4, 16);
    const auto hi = super_resolve(m, low, "a red square at the center", 4, DecodeParams::greedy(), 16);
    EXPECT_EQ(hi.codes.size(), 64u);
    EXPECT_EQ(hi.grid_h, 8u);

    // K=1 equals greedy next-token decoding of the high-resolution span
    const auto k1 = super_resolve(m, low, "a red square at the center", 1, DecodeParams::greedy(), 16);
    TokenSequence seq = superres_prompt(m.layout(), "a red square at the center", low, 16, 16);
    std::vector<std::uint32_t> want;
    for (std::size_t i = 0; i < 64; ++i) {
        const Tensor logits = m.forward(seq);
        const std::size_t lo = m.layout().visual_begin();
        const auto id = static_cast<TokenId>(argmax(std::span<const float>(logits.row(seq.size() - 1), logits.cols()), lo,
                                                    logits.cols()));
        want.push_back(m.layout().code_of(id));
        seq.push(id, Modality::vision, false);
    }
    EXPECT_EQ(k1.codes, want);
    EXPECT_THROW(super_resolve(m, low, "x", 3, DecodeParams::greedy(), 16), BlockGeometryError);
}

TEST(SuperResolve, AspectPreserved) {
    EXPECT_EQ(superres_geometry(32, 48, 64, 8), (std::pair<std::size_t, std::size_t>{40, 64}));
    EXPECT_EQ(superres_geometry(32, 32, 64, 8), (std::pair<std::size_t, std::size_t>{64, 64}));
}

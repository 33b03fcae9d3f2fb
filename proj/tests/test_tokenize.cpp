#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "mars/dataset.hpp"
#include "mars/random.hpp"
#include "mars/tokenize.hpp"

using namespace mars;

namespace {

VisualCodebook random_codebook(Rng& rng, std::size_t patch, std::size_t size) {
    VisualCodebook cb{patch, size, std::vector<float>(size * 3 * patch * patch)};
    for (float& v : cb.codewords) v = static_cast<float>(rng.uniform());
    return cb;
}

// Exhaustive scan written independently of VisualCodebook::nearest.
std::size_t brute_nearest(const VisualCodebook& cb, const std::vector<float>& patch) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cb.size; ++c) {
        double d = 0;
        for (std::size_t j = 0; j < cb.dim(); ++j) {
            const double e = static_cast<double>(patch[j]) - cb.codewords[c * cb.dim() + j];
            d += e * e;
        }
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

}  // namespace

TEST(TextCodec, ByteValues) {
    EXPECT_EQ(encode_text("A"), std::vector<TokenId>{65});
    EXPECT_TRUE(encode_text("").empty());
    EXPECT_EQ(decode_text(std::vector<TokenId>{72, 105}), "Hi");
    EXPECT_EQ(decode_text(std::vector<TokenId>{}), "");
}

TEST(TextCodec, RandomRoundTrip) {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        std::string s(rng.below(40), '\0');
        for (char& c : s) c = static_cast<char>(rng.below(256));
        EXPECT_EQ(decode_text(encode_text(s)), s);
    }
}

TEST(TextCodec, Utf8RoundTrip) {
    const std::string s = "caf\xc3\xa9 \xe2\x86\x92 \xf0\x9f\x99\x82";
    EXPECT_EQ(encode_text(s).size(), s.size());
    EXPECT_EQ(decode_text(encode_text(s)), s);
}

TEST(TextCodec, CaptionGrammarRoundTrip) {
    std::size_t n = 0;
    for (std::size_t s = 0; s < kShapeNames.size(); ++s)
        for (std::size_t c = 0; c < kColors.size(); ++c)
            for (std::size_t p = 0; p < kPositionNames.size(); ++p) {
                const std::string caption = render_caption({s, c, p});
                EXPECT_EQ(decode_text(encode_text(caption)), caption);
                ++n;
            }
    EXPECT_EQ(n, 120u);
}

TEST(TextCodec, RejectsNonByteIds) {
    EXPECT_THROW(decode_text(std::vector<TokenId>{65, 256}), RangeError);
}

TEST(KMeans, SingleDistinctPatch) {
    const std::size_t dim = 12;
    std::vector<float> patches;
    for (int i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < dim; ++j) patches.push_back(0.1f * static_cast<float>(j));
    const auto cb = train_codebook(patches, dim, 1, 5, 3);
    ASSERT_EQ(cb.size, 1u);
    for (std::size_t j = 0; j < dim; ++j) EXPECT_EQ(cb.codewords[j], patches[j]);
}

TEST(KMeans, TwoCloudsRecoverMeans) {
    const std::size_t dim = 12, per = 50;
    Rng rng(4);
    std::vector<float> patches;
    std::vector<double> mean_a(dim, 0.0), mean_b(dim, 0.0);
    for (std::size_t i = 0; i < 2 * per; ++i) {
        const bool a = i % 2 == 0;
        for (std::size_t j = 0; j < dim; ++j) {
            const float v = (a ? 0.1f : 0.9f) + static_cast<float>(rng.normal() * 0.02);
            patches.push_back(v);
            (a ? mean_a : mean_b)[j] += v;
        }
    }
    for (std::size_t j = 0; j < dim; ++j) {
        mean_a[j] /= per;
        mean_b[j] /= per;
    }
    const auto cb = train_codebook(patches, dim, 2, 10, 9);
    // identify which codeword landed on which cloud
    const std::size_t ia = cb.codewords[0] < 0.5f ? 0 : 1;
    for (std::size_t j = 0; j < dim; ++j) {
        EXPECT_NEAR(cb.codeword(ia)[j], mean_a[j], 1e-5);
        EXPECT_NEAR(cb.codeword(1 - ia)[j], mean_b[j], 1e-5);
    }
}

TEST(KMeans, ObjectiveNeverIncreases) {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        Rng rng(seed * 31);
        std::vector<float> patches(300 * 12);
        for (float& v : patches) v = static_cast<float>(rng.uniform());
        KMeansTrace trace;
        train_codebook(patches, 12, 8, 15, seed, &trace);
        ASSERT_EQ(trace.objective.size(), 16u);
        for (std::size_t i = 1; i < trace.objective.size(); ++i)
            EXPECT_LE(trace.objective[i], trace.objective[i - 1] * (1 + 1e-12)) << "seed " << seed << " iter " << i;
    }
}

TEST(KMeans, DeterministicForSeed) {
    Rng rng(8);
    std::vector<float> patches(100 * 12);
    for (float& v : patches) v = static_cast<float>(rng.uniform());
    EXPECT_EQ(train_codebook(patches, 12, 6, 5, 77).codewords, train_codebook(patches, 12, 6, 5, 77).codewords);
}

TEST(KMeans, Errors) {
    std::vector<float> patches(3 * 12, 0.5f);
    EXPECT_THROW(train_codebook(patches, 12, 4, 5, 0), InsufficientDataError);
    EXPECT_THROW(train_codebook(patches, 12, 2, 0, 0), ConfigError);
    EXPECT_THROW(train_codebook(patches, 10, 2, 1, 0), GeometryError);
}

TEST(Quantize, PaperScaleTokenCount) {
    VisualCodebook cb{16, 2, std::vector<float>(2 * 3 * 16 * 16, 0.0f)};
    std::fill(cb.codewords.begin() + cb.dim(), cb.codewords.end(), 1.0f);
    const Image img(256, 256, 0.3f);
    const auto grid = quantize_image(img, cb);
    EXPECT_EQ(grid.codes.size(), 256u);
    EXPECT_EQ(grid.grid_h, 16u);
    EXPECT_EQ(grid.grid_w, 16u);
}

TEST(Quantize, DeskTokenCount) {
    Rng rng(1);
    const auto cb = random_codebook(rng, 8, 64);
    EXPECT_EQ(quantize_image(Image(32, 32), cb).codes.size(), 16u);
}

TEST(Quantize, TiledCodewordGivesConstantTokens) {
    Rng rng(2);
    const auto cb = random_codebook(rng, 8, 64);
    const std::vector<std::uint32_t> tiled(16, 37);
    const auto grid = quantize_image(dequantize_tokens(tiled, cb, 4, 4), cb);
    for (auto c : grid.codes) EXPECT_EQ(c, 37u);
}

TEST(Quantize, MatchesBruteForce) {
    Rng rng(3);
    const auto cb = random_codebook(rng, 8, 64);
    for (int i = 0; i < 100; ++i) {
        std::vector<float> patch(cb.dim());
        for (float& v : patch) v = static_cast<float>(rng.uniform());
        EXPECT_EQ(cb.nearest(patch.data()), brute_nearest(cb, patch));
    }
}

TEST(Quantize, TiesGoToLowestIndex) {
    VisualCodebook cb{1, 3, {0.f, 0.f, 0.f, 1.f, 1.f, 1.f, 1.f, 1.f, 1.f}};
    const std::vector<float> mid{0.5f, 0.5f, 0.5f};
    EXPECT_EQ(cb.nearest(mid.data()), 0u);
    const std::vector<float> one{1.f, 1.f, 1.f};
    EXPECT_EQ(cb.nearest(one.data()), 1u);
}

TEST(Quantize, RasterOrder) {
    VisualCodebook cb{8, 2, std::vector<float>(2 * 192, 1.0f)};
    std::fill(cb.codewords.begin(), cb.codewords.begin() + 192, 0.0f);
    Image img(16, 16, 1.0f);
    // black top-right patch only
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 8; x < 16; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 0.0f;
    EXPECT_EQ(quantize_image(img, cb).codes, (std::vector<std::uint32_t>{1, 0, 1, 1}));
}

TEST(Quantize, IndivisibleImage) {
    Rng rng(4);
    const auto cb = random_codebook(rng, 8, 4);
    EXPECT_THROW(quantize_image(Image(30, 32), cb), GeometryError);
}

TEST(Dequantize, RoundTripOnRandomSequences) {
    Rng rng(5);
    const auto cb = random_codebook(rng, 8, 64);
    for (int i = 0; i < 200; ++i) {
        const std::size_t gh = 1 + rng.below(4), gw = 1 + rng.below(4);
        std::vector<std::uint32_t> codes(gh * gw);
        for (auto& c : codes) c = static_cast<std::uint32_t>(rng.below(64));
        EXPECT_EQ(quantize_image(dequantize_tokens(codes, cb, gh, gw), cb).codes, codes);
    }
}

TEST(Dequantize, SingleTokenIsItsCodeword) {
    Rng rng(6);
    const auto cb = random_codebook(rng, 4, 8);
    const std::vector<std::uint32_t> one{5};
    const Image img = dequantize_tokens(one, cb, 1, 1);
    ASSERT_EQ(img.width, 4u);
    EXPECT_TRUE(std::equal(img.pixels.begin(), img.pixels.end(), cb.codeword(5)));
}

TEST(Dequantize, Errors) {
    Rng rng(7);
    const auto cb = random_codebook(rng, 4, 8);
    EXPECT_THROW(dequantize_tokens(std::vector<std::uint32_t>{1, 2, 3}, cb, 2, 2), GeometryError);
    EXPECT_THROW(dequantize_tokens(std::vector<std::uint32_t>{8}, cb, 1, 1), ModalityError);
}

TEST(Vocab, DeskLayout) {
    Rng rng(8);
    const auto cb = random_codebook(rng, 8, 64);
    std::vector<float> text(256 * 16);
    for (float& v : text) v = static_cast<float>(rng.normal());
    const auto vocab = build_multimodal_vocab(256, {default_special_names().begin(), default_special_names().end()},
                                              cb, 16, text);
    const auto& l = vocab.layout;
    EXPECT_EQ(l.total_size(), 326u);
    EXPECT_EQ(l.special(Special::bos), 256u);
    EXPECT_EQ(l.special(Special::eoi), 261u);
    EXPECT_EQ(l.visual_begin(), 262u);
    EXPECT_EQ(vocab.embedding.size(), 326u * 16);
    for (TokenId id = 0; id < l.total_size(); ++id)
        EXPECT_EQ(l.modality_of(id), id < 262 ? Modality::text : Modality::vision);
    EXPECT_THROW(l.modality_of(326), RangeError);
}

TEST(Vocab, PaperScaleArithmetic) {
    VocabLayout l;
    l.text_size = 151936;
    l.visual_size = 8192;
    EXPECT_EQ(l.total_size(), 160134u);
}

TEST(Vocab, NewRowsAreExactTextMean) {
    Rng rng(9);
    const auto cb = random_codebook(rng, 2, 10);
    const std::size_t n = 256, d = 8;
    std::vector<float> text(n * d);
    for (float& v : text) v = static_cast<float>(rng.normal());
    const auto vocab = build_multimodal_vocab(n, {default_special_names().begin(), default_special_names().end()}, cb,
                                              d, text);
    // oracle: sum in long double, then round once
    std::vector<float> mean(d);
    for (std::size_t j = 0; j < d; ++j) {
        long double s = 0;
        for (std::size_t r = 0; r < n; ++r) s += text[r * d + j];
        mean[j] = static_cast<float>(static_cast<double>(s / n));
    }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(vocab.embedding[r * d + j], text[r * d + j]);
    for (std::size_t r = n; r < vocab.layout.total_size(); ++r)
        for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(vocab.embedding[r * d + j], mean[j]) << "row " << r;
}

TEST(Vocab, WrongSpecialCount) {
    Rng rng(10);
    const auto cb = random_codebook(rng, 2, 4);
    std::vector<float> text(256 * 4, 0.0f);
    EXPECT_THROW(build_multimodal_vocab(256, {"<bos>", "<eos>"}, cb, 4, text), ConfigError);
}

TEST(TokenSequence, TagsMustMatchRanges) {
    VocabLayout l;
    l.visual_size = 64;
    TokenSequence s;
    s.push(256, Modality::text, false);
    s.push(300, Modality::vision, true);
    EXPECT_NO_THROW(s.validate(l));
    s.push(65, Modality::vision, true);
    EXPECT_THROW(s.validate(l), ModalityError);
    const std::vector<TokenId> ids{256, 65, 262, 325, 261};
    const auto t = TokenSequence::from_ids(l, ids);
    EXPECT_EQ(t.modality[2], Modality::vision);
    EXPECT_EQ(t.modality[4], Modality::text);
    EXPECT_FALSE(t.loss_mask[0]);
    EXPECT_TRUE(t.loss_mask[1]);
}

TEST(Ppm, RoundTrip) {
    Image img(3, 2);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i * 13 % 256) / 255.0f;
    const auto path = std::filesystem::temp_directory_path() / "mars_ppm_roundtrip.ppm";
    write_ppm(path, img);
    EXPECT_EQ(read_ppm(path), img);
    std::filesystem::remove(path);
}

TEST(Ppm, HeaderComments) {
    const std::string text("P6\n# comment\n1 1\n255\n\xff\x00\x80", 24);
    const Image img = decode_ppm(std::vector<std::uint8_t>(text.begin(), text.end()));
    EXPECT_EQ(img.pixels, (std::vector<float>{1.0f, 0.0f, 128.0f / 255.0f}));
}

TEST(Ppm, Rejects) {
    const std::string bad_magic = "P3\n1 1\n255\n000";
    EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>(bad_magic.begin(), bad_magic.end())), FormatError);
    const std::string short_data = "P6\n2 2\n255\n\x01\x02";
    EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>(short_data.begin(), short_data.end())), FormatError);
    EXPECT_THROW(read_ppm("/nonexistent/none.ppm"), DataError);
}

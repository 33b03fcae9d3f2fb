#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mars/errors.hpp"
#include "mars/image.hpp"
#include "mars/random.hpp"

namespace mars {

using TokenId = std::uint32_t;

enum class Modality : std::uint8_t { text = 0, vision = 1 };

// ---------------------------------------------------------------- text codec

inline constexpr std::size_t kByteVocab = 256;

/// One id per byte; the id is the byte value.
inline std::vector<TokenId> encode_text(std::string_view s) {
    std::vector<TokenId> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(c);
    return ids;
}

inline std::string decode_text(std::span<const TokenId> ids) {
    std::string s;
    s.reserve(ids.size());
    for (TokenId id : ids) {
        if (id >= kByteVocab) throw RangeError("decode_text: id " + std::to_string(id) + " is not a byte");
        s.push_back(static_cast<char>(id));
    }
    return s;
}

// ------------------------------------------------------------ visual codebook

/// C codewords of dimension D = 3·P², each a flattened P×P×3 patch
/// (row-major over patch rows, then columns, then channels).
struct VisualCodebook {
    std::size_t patch_size = 0;
    std::size_t size = 0;
    std::vector<float> codewords;

    std::size_t dim() const { return 3 * patch_size * patch_size; }
    const float* codeword(std::size_t i) const { return codewords.data() + i * dim(); }

    /// Index of the nearest codeword by squared Euclidean distance; ties go to
    /// the lowest index.
    std::size_t nearest(const float* patch) const {
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < size; ++c) {
            const double dist = squared_distance(patch, codeword(c), dim());
            if (dist < best_dist) {
                best_dist = dist;
                best = c;
            }
        }
        return best;
    }

    static double squared_distance(const float* a, const float* b, std::size_t n) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
            s += diff * diff;
        }
        return s;
    }

    void validate() const {
        if (size < 2) throw ConfigError("codebook needs at least 2 codewords");
        if (codewords.size() != size * dim()) throw ConfigError("codebook data does not match C×D");
        for (float v : codewords)
            if (!std::isfinite(v)) throw NumericError("codebook has a non-finite codeword");
    }
};

inline std::size_t patch_size_for_dim(std::size_t dim) {
    const auto p = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dim) / 3.0)));
    if (p == 0 || 3 * p * p != dim) throw GeometryError("patch dimension " + std::to_string(dim) + " is not 3·P²");
    return p;
}

struct KMeansTrace {
    // Quantization error of the codebook before each update, plus the final one.
    std::vector<double> objective;
};

/// Lloyd's k-means over N patches of width dim (row-major N×dim).
///
/// Initialisation takes the first C distinct patches of a seeded shuffle. An
/// empty cluster is reseeded to the patch farthest from its centroid.
inline VisualCodebook train_codebook(std::span<const float> patches, std::size_t dim, std::size_t clusters,
                                     std::size_t iters, std::uint64_t seed, KMeansTrace* trace = nullptr) {
    const std::size_t patch = patch_size_for_dim(dim);
    if (patches.size() % dim != 0) throw GeometryError("patch matrix is not N×D");
    const std::size_t n = patches.size() / dim;
    if (clusters == 0) throw ConfigError("codebook size must be positive");
    if (n < clusters)
        throw InsufficientDataError("k-means needs at least " + std::to_string(clusters) + " patches, got " +
                                    std::to_string(n));
    if (iters == 0) throw ConfigError("k-means needs at least one iteration");

    auto row = [&](std::size_t i) { return patches.data() + i * dim; };
    auto same = [&](std::size_t a, std::size_t b) {
        return std::equal(row(a), row(a) + dim, row(b));
    };

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<std::size_t> chosen;
    for (std::size_t idx : order) {
        if (chosen.size() == clusters) break;
        bool dup = false;
        for (std::size_t c : chosen) {
            if (same(c, idx)) {
                dup = true;
                break;
            }
        }
        if (!dup) chosen.push_back(idx);
    }
    // fewer distinct patches than clusters: pad with repeats
    for (std::size_t i = 0; chosen.size() < clusters; ++i) chosen.push_back(order[i % n]);

    VisualCodebook cb{patch, clusters, std::vector<float>(clusters * dim)};
    for (std::size_t c = 0; c < clusters; ++c) std::copy_n(row(chosen[c]), dim, cb.codewords.data() + c * dim);

    std::vector<std::size_t> assign(n);
    auto assign_all = [&] {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            assign[i] = cb.nearest(row(i));
            total += VisualCodebook::squared_distance(row(i), cb.codeword(assign[i]), dim);
        }
        return total;
    };

    for (std::size_t it = 0; it < iters; ++it) {
        const double obj = assign_all();
        if (trace) trace->objective.push_back(obj);

        std::vector<double> sums(clusters * dim, 0.0);
        std::vector<std::size_t> counts(clusters, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            double* s = sums.data() + assign[i] * dim;
            const float* r = row(i);
            for (std::size_t j = 0; j < dim; ++j) s[j] += r[j];
        }
        std::vector<std::size_t> empty;
        for (std::size_t c = 0; c < clusters; ++c) {
            if (counts[c] == 0) {
                empty.push_back(c);
                continue;
            }
            for (std::size_t j = 0; j < dim; ++j)
                cb.codewords[c * dim + j] = static_cast<float>(sums[c * dim + j] / static_cast<double>(counts[c]));
        }
        if (!empty.empty()) {
            std::vector<double> dist(n);
            for (std::size_t i = 0; i < n; ++i)
                dist[i] = VisualCodebook::squared_distance(row(i), cb.codeword(assign[i]), dim);
            std::vector<bool> used(n, false);
            for (std::size_t c : empty) {
                std::size_t far = n;
                for (std::size_t i = 0; i < n; ++i)
                    if (!used[i] && (far == n || dist[i] > dist[far])) far = i;
                used[far] = true;
                std::copy_n(row(far), dim, cb.codewords.data() + c * dim);
            }
        }
    }
    const double final_obj = assign_all();
    if (trace) trace->objective.push_back(final_obj);
    return cb;
}

// ------------------------------------------------------------ image tokens

/// Codebook indices of an image in raster (row-major) order over the grid.
struct TokenGrid {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<std::uint32_t> codes;

    bool operator==(const TokenGrid&) const = default;
};

inline void check_divisible(std::size_t h, std::size_t w, std::size_t patch) {
    if (patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0)
        throw GeometryError("image " + std::to_string(w) + "x" + std::to_string(h) +
                            " is not divisible into " + std::to_string(patch) + "-pixel patches");
}

/// Flattened P×P×3 patches of img in raster order.
inline std::vector<float> extract_patches(const Image& img, std::size_t patch) {
    check_divisible(img.height, img.width, patch);
    const std::size_t gh = img.height / patch, gw = img.width / patch, dim = 3 * patch * patch;
    std::vector<float> out(gh * gw * dim);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            float* dst = out.data() + (gy * gw + gx) * dim;
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px)
                    for (std::size_t c = 0; c < 3; ++c)
                        *dst++ = img.at(gy * patch + py, gx * patch + px, c);
        }
    return out;
}

inline TokenGrid quantize_image(const Image& img, const VisualCodebook& cb) {
    const std::size_t p = cb.patch_size;
    const auto patches = extract_patches(img, p);
    TokenGrid grid{img.height / p, img.width / p, {}};
    grid.codes.reserve(grid.grid_h * grid.grid_w);
    for (std::size_t i = 0; i < grid.grid_h * grid.grid_w; ++i)
        grid.codes.push_back(static_cast<std::uint32_t>(cb.nearest(patches.data() + i * cb.dim())));
    return grid;
}

/// Tiles each code's codeword back into pixels in raster order.
inline Image dequantize_tokens(std::span<const std::uint32_t> codes, const VisualCodebook& cb, std::size_t grid_h,
                               std::size_t grid_w) {
    if (codes.size() != grid_h * grid_w)
        throw GeometryError("dequantize: " + std::to_string(codes.size()) + " tokens for a " +
                            std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    const std::size_t p = cb.patch_size;
    Image img(grid_w * p, grid_h * p);
    for (std::size_t g = 0; g < codes.size(); ++g) {
        if (codes[g] >= cb.size) throw ModalityError("dequantize: token " + std::to_string(codes[g]) + " is not visual");
        const float* src = cb.codeword(codes[g]);
        const std::size_t gy = g / grid_w, gx = g % grid_w;
        for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
                for (std::size_t c = 0; c < 3; ++c) img.at(gy * p + py, gx * p + px, c) = *src++;
    }
    return img;
}

// ------------------------------------------------------------ vocabulary

inline constexpr std::size_t kSpecialCount = 6;

enum class Special : std::size_t { bos = 0, eos, pad, sep, boi, eoi };

inline const std::array<std::string, kSpecialCount>& default_special_names() {
    static const std::array<std::string, kSpecialCount> names{"<bos>", "<eos>", "<pad>", "<sep>", "<boi>", "<eoi>"};
    return names;
}

/// Id layout [text | specials | visual] of the merged vocabulary.
struct VocabLayout {
    std::size_t text_size = kByteVocab;
    std::size_t visual_size = 0;
    std::array<std::string, kSpecialCount> special_names = default_special_names();

    std::size_t special_begin() const { return text_size; }
    // end of the text+special range, which is also where visual ids start
    std::size_t text_end() const { return text_size + kSpecialCount; }
    std::size_t visual_begin() const { return text_end(); }
    std::size_t total_size() const { return text_end() + visual_size; }

    TokenId special(Special s) const { return static_cast<TokenId>(text_size + static_cast<std::size_t>(s)); }

    TokenId visual_id(std::uint32_t code) const {
        if (code >= visual_size) throw ModalityError("code " + std::to_string(code) + " outside the codebook");
        return static_cast<TokenId>(visual_begin() + code);
    }

    std::uint32_t code_of(TokenId id) const {
        if (id < visual_begin() || id >= total_size())
            throw ModalityError("id " + std::to_string(id) + " is not a visual token");
        return static_cast<std::uint32_t>(id - visual_begin());
    }

    Modality modality_of(TokenId id) const {
        if (id >= total_size()) throw RangeError("id " + std::to_string(id) + " outside the vocabulary");
        return id < visual_begin() ? Modality::text : Modality::vision;
    }

    bool is_special(TokenId id) const { return id >= special_begin() && id < text_end(); }

    bool operator==(const VocabLayout&) const = default;
};

/// Merged vocabulary: id layout, the codebook behind the visual ids and the
/// initial embedding table (total_size × d).
struct MultimodalVocab {
    VocabLayout layout;
    VisualCodebook codebook;
    std::size_t width = 0;
    std::vector<float> embedding;  // table at construction; a model's embedding tensors take over from there

    const float* embedding_row(TokenId id) const { return embedding.data() + static_cast<std::size_t>(id) * width; }
};

/// Column-wise mean of a rows×d matrix, accumulated in double.
inline std::vector<float> mean_rows(std::span<const float> m, std::size_t rows, std::size_t d) {
    std::vector<double> acc(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) acc[j] += m[r * d + j];
    std::vector<float> mean(d);
    for (std::size_t j = 0; j < d; ++j) mean[j] = static_cast<float>(acc[j] / static_cast<double>(rows));
    return mean;
}

/// Text rows are copied; special and visual rows start at the mean of the
/// text rows.
inline MultimodalVocab build_multimodal_vocab(std::size_t text_size, const std::vector<std::string>& special_names,
                                              const VisualCodebook& cb, std::size_t d,
                                              std::span<const float> text_embeddings) {
    if (special_names.size() != kSpecialCount)
        throw ConfigError("expected " + std::to_string(kSpecialCount) + " special tokens, got " +
                          std::to_string(special_names.size()));
    if (text_size == 0 || d == 0) throw ConfigError("vocabulary needs text rows and a positive width");
    if (text_embeddings.size() != text_size * d)
        throw DimensionError("text embeddings hold " + std::to_string(text_embeddings.size()) + " values, expected " +
                             std::to_string(text_size) + "x" + std::to_string(d));
    cb.validate();
    MultimodalVocab v;
    v.layout.text_size = text_size;
    v.layout.visual_size = cb.size;
    for (std::size_t i = 0; i < kSpecialCount; ++i) v.layout.special_names[i] = special_names[i];
    v.codebook = cb;
    v.width = d;
    const auto mean = mean_rows(text_embeddings, text_size, d);
    v.embedding.assign(text_embeddings.begin(), text_embeddings.end());
    v.embedding.reserve(v.layout.total_size() * d);
    for (std::size_t r = text_size; r < v.layout.total_size(); ++r) v.embedding.insert(v.embedding.end(), mean.begin(), mean.end());
    return v;
}

// ------------------------------------------------------------ sequences

/// Ids with per-position modality tags and loss flags. loss_mask[t] marks z_t
/// as a supervised prediction target.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<Modality> modality;
    std::vector<bool> loss_mask;

    std::size_t size() const { return ids.size(); }

    void push(TokenId id, Modality m, bool supervised) {
        ids.push_back(id);
        modality.push_back(m);
        loss_mask.push_back(supervised);
    }

    /// Every id must sit in the range its tag claims.
    void validate(const VocabLayout& layout) const {
        if (modality.size() != ids.size() || loss_mask.size() != ids.size())
            throw DimensionError("token sequence fields have different lengths");
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto tag = static_cast<std::uint8_t>(modality[t]);
            if (tag > 1) throw ModalityError("unknown modality tag at position " + std::to_string(t));
            if (layout.modality_of(ids[t]) != modality[t])
                throw ModalityError("id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                                    " does not match its modality tag");
        }
    }

    /// Tags derived from id ranges.
    static TokenSequence from_ids(const VocabLayout& layout, std::span<const TokenId> ids, bool supervise_all = true) {
        TokenSequence s;
        for (std::size_t t = 0; t < ids.size(); ++t) s.push(ids[t], layout.modality_of(ids[t]), supervise_all && t > 0);
        return s;
    }
};

}  // namespace mars

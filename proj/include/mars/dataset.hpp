#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mars/errors.hpp"
#include "mars/image.hpp"
#include "mars/random.hpp"

namespace mars {

// ------------------------------------------------------------ attribute grammar

struct NamedColor {
    const char* name;
    float r, g, b;
};

inline constexpr std::array<const char*, 3> kShapeNames{"square", "circle", "triangle"};
inline constexpr std::array<NamedColor, 8> kColors{{
    {"red", 1.0f, 0.0f, 0.0f},
    {"green", 0.0f, 1.0f, 0.0f},
    {"blue", 0.0f, 0.0f, 1.0f},
    {"yellow", 1.0f, 1.0f, 0.0f},
    {"magenta", 1.0f, 0.0f, 1.0f},
    {"cyan", 0.0f, 1.0f, 1.0f},
    {"black", 0.0f, 0.0f, 0.0f},
    {"orange", 1.0f, 128.0f / 255.0f, 0.0f},
}};
inline constexpr std::array<const char*, 5> kPositionNames{"top-left", "top-right", "bottom-left", "bottom-right",
                                                           "center"};

/// Indices into kShapeNames, kColors and kPositionNames.
struct Attributes {
    std::size_t shape = 0;
    std::size_t color = 0;
    std::size_t position = 0;

    bool operator==(const Attributes&) const = default;
};

inline std::string render_caption(const Attributes& a) {
    return std::string("a ") + kColors.at(a.color).name + " " + kShapeNames.at(a.shape) + " at the " +
           kPositionNames.at(a.position);
}

namespace detail {

template <class Names, class Get>
std::optional<std::size_t> lookup(const Names& names, std::string_view word, Get get) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (word == get(names[i])) return i;
    return std::nullopt;
}

}  // namespace detail

/// Inverse of render_caption; anything outside "a {color} {shape} at the
/// {position}" is a GrammarError.
inline Attributes parse_caption(std::string_view caption) {
    std::istringstream in{std::string(caption)};
    std::vector<std::string> w;
    for (std::string s; in >> s;) w.push_back(s);
    auto fail = [&](const std::string& why) {
        return GrammarError("caption \"" + std::string(caption) + "\": " + why);
    };
    if (w.size() != 6 || w[0] != "a" || w[3] != "at" || w[4] != "the")
        throw fail("expected \"a <color> <shape> at the <position>\"");
    const auto color = detail::lookup(kColors, w[1], [](const NamedColor& c) { return c.name; });
    const auto shape = detail::lookup(kShapeNames, w[2], [](const char* s) { return s; });
    const auto pos = detail::lookup(kPositionNames, w[5], [](const char* s) { return s; });
    if (!color) throw fail("unknown color '" + w[1] + "'");
    if (!shape) throw fail("unknown shape '" + w[2] + "'");
    if (!pos) throw fail("unknown position '" + w[5] + "'");
    Attributes a{*shape, *color, *pos};
    if (render_caption(a) != caption) throw fail("not in canonical form");
    return a;
}

// ------------------------------------------------------------ rendering

/// Top-left corner of a size×size shape on a width×height canvas.
inline std::pair<std::size_t, std::size_t> shape_origin(std::size_t position, std::size_t width, std::size_t height,
                                                        std::size_t size) {
    if (size > width || size > height) throw GeometryError("shape does not fit the canvas");
    switch (position) {
        case 0: return {0, 0};
        case 1: return {0, width - size};
        case 2: return {height - size, 0};
        case 3: return {height - size, width - size};
        case 4: return {(height - size) / 2, (width - size) / 2};
        default: throw RangeError("position index " + std::to_string(position));
    }
}

/// Whether local pixel (y, x) of a size×size shape cell is covered.
inline bool shape_covers(std::size_t shape, std::size_t y, std::size_t x, std::size_t size) {
    switch (shape) {
        case 0: return true;
        case 1: {
            const double c = static_cast<double>(size) / 2.0;
            const double dy = static_cast<double>(y) + 0.5 - c, dx = static_cast<double>(x) + 0.5 - c;
            return dy * dy + dx * dx <= c * c;
        }
        case 2: return x <= y;
        default: throw RangeError("shape index " + std::to_string(shape));
    }
}

/// One shape on a white canvas.
inline Image render_image(const Attributes& a, std::size_t width, std::size_t height, std::size_t size) {
    const NamedColor& col = kColors.at(a.color);
    Image img(width, height, 1.0f);
    const auto [oy, ox] = shape_origin(a.position, width, height, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            if (!shape_covers(a.shape, y, x, size)) continue;
            img.at(oy + y, ox + x, 0) = col.r;
            img.at(oy + y, ox + x, 1) = col.g;
            img.at(oy + y, ox + x, 2) = col.b;
        }
    return img;
}

// ------------------------------------------------------------ oracle classifier

/// Attribute read-out for generated images: colour by majority vote of
/// nearest named colours over the foreground, position from the bounding-box
/// centre, shape by normalised correlation against templates.
inline std::optional<Attributes> classify_image(const Image& img) {
    std::size_t y0 = img.height, y1 = 0, x0 = img.width, x1 = 0, count = 0;
    std::array<std::size_t, kColors.size()> votes{};
    auto foreground = [&](std::size_t y, std::size_t x) {
        float m = 0;
        for (std::size_t c = 0; c < 3; ++c) m = std::max(m, 1.0f - img.at(y, x, c));
        return m > 0.25f;
    };
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            if (!foreground(y, x)) continue;
            ++count;
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            std::size_t best = 0;
            double best_d = 1e30;
            for (std::size_t k = 0; k < kColors.size(); ++k) {
                const double dr = img.at(y, x, 0) - kColors[k].r, dg = img.at(y, x, 1) - kColors[k].g,
                             db = img.at(y, x, 2) - kColors[k].b;
                const double d = dr * dr + dg * dg + db * db;
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            ++votes[best];
        }
    if (count == 0) return std::nullopt;
    Attributes a;
    a.color = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());

    const double cy = (static_cast<double>(y0 + y1) + 1.0) / 2.0 / static_cast<double>(img.height);
    const double cx = (static_cast<double>(x0 + x1) + 1.0) / 2.0 / static_cast<double>(img.width);
    if (std::abs(cy - 0.5) <= 0.125 && std::abs(cx - 0.5) <= 0.125)
        a.position = 4;
    else
        a.position = (cy < 0.5 ? 0 : 2) + (cx < 0.5 ? 0 : 1);

    // bounding box resampled to 16×16 occupancy, compared with each template
    constexpr std::size_t g = 16;
    const std::size_t bh = y1 - y0 + 1, bw = x1 - x0 + 1;
    std::array<double, g * g> occ{};
    for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) {
            const std::size_t sy = y0 + (y * bh + bh / 2) / g, sx = x0 + (x * bw + bw / 2) / g;
            occ[y * g + x] = foreground(std::min(sy, y1), std::min(sx, x1)) ? 1.0 : 0.0;
        }
    double best_score = -1e30;
    for (std::size_t s = 0; s < kShapeNames.size(); ++s) {
        double dot = 0, nt = 0, no = 0;
        for (std::size_t y = 0; y < g; ++y)
            for (std::size_t x = 0; x < g; ++x) {
                const double t = shape_covers(s, y, x, g) ? 1.0 : 0.0;
                const double o = occ[y * g + x];
                dot += t * o;
                nt += t * t;
                no += o * o;
            }
        const double score = dot / std::sqrt(nt * std::max(no, 1e-12));
        if (score > best_score) {
            best_score = score;
            a.shape = s;
        }
    }
    return a;
}

// ------------------------------------------------------------ synthetic corpus

/// Per-stage image geometry.
struct StageGeometry {
    static constexpr std::size_t kMinSide = 32;
    static constexpr std::size_t kShapeSize = 16;
    static constexpr std::size_t kHighSide = 64;
    static constexpr std::array<std::size_t, 3> kLongSides{32, 48, 64};
};

struct Sample {
    Attributes attrs;
    Image image;
    std::optional<Image> high;  // Stage III target

    std::string caption() const { return render_caption(attrs); }
};

inline void check_stage(int stage) {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(stage));
}

/// n seeded samples. Stage 1: 32×32. Stage 2: long side in {32, 48, 64},
/// short side 32, either orientation. Stage 3: 32×32 low with a 64×64 high.
inline std::vector<Sample> synthesize(std::size_t n, std::uint64_t seed, int stage) {
    check_stage(stage);
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.attrs.shape = rng.below(kShapeNames.size());
        s.attrs.color = rng.below(kColors.size());
        s.attrs.position = rng.below(kPositionNames.size());
        std::size_t w = StageGeometry::kMinSide, h = StageGeometry::kMinSide;
        if (stage == 2) {
            const std::size_t long_side = StageGeometry::kLongSides[rng.below(StageGeometry::kLongSides.size())];
            (rng.below(2) ? w : h) = long_side;
        }
        s.image = render_image(s.attrs, w, h, StageGeometry::kShapeSize);
        if (stage == 3)
            s.high = render_image(s.attrs, StageGeometry::kHighSide, StageGeometry::kHighSide,
                                  2 * StageGeometry::kShapeSize);
        out.push_back(std::move(s));
    }
    return out;
}

/// Distinct (shape, colour, position) samples for overfitting checks.
inline std::vector<Sample> distinct_samples(std::size_t n, std::uint64_t seed, int stage) {
    check_stage(stage);
    const std::size_t total = kShapeNames.size() * kColors.size() * kPositionNames.size();
    if (n > total) throw ConfigError("only " + std::to_string(total) + " distinct attribute combinations exist");
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        const std::size_t k = order[i];
        s.attrs = {k % 3, (k / 3) % 8, k / 24};
        s.image = render_image(s.attrs, StageGeometry::kMinSide, StageGeometry::kMinSide, StageGeometry::kShapeSize);
        if (stage == 3)
            s.high = render_image(s.attrs, StageGeometry::kHighSide, StageGeometry::kHighSide,
                                  2 * StageGeometry::kShapeSize);
        out.push_back(std::move(s));
    }
    return out;
}

// ------------------------------------------------------------ manifest I/O

inline nlohmann::json manifest_line(const Sample& s, const std::string& image, const std::string& hi_image) {
    nlohmann::json j;
    j["caption"] = s.caption();
    j["image"] = image;
    j["width"] = s.image.width;
    j["height"] = s.image.height;
    j["shape"] = kShapeNames[s.attrs.shape];
    j["color"] = kColors[s.attrs.color].name;
    j["position"] = kPositionNames[s.attrs.position];
    if (s.high) j["hi_image"] = hi_image;
    return j;
}

/// Writes manifest.jsonl plus PPM files under dir/images.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw DataError("cannot write " + (dir / "manifest.jsonl").string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06zu", i);
        const std::string image = std::string("images/") + stem + ".ppm";
        const std::string hi = std::string("images/") + stem + "_hi.ppm";
        write_ppm(dir / image, samples[i].image);
        if (samples[i].high) write_ppm(dir / hi, *samples[i].high);
        manifest << manifest_line(samples[i], image, hi).dump() << '\n';
    }
}

inline std::filesystem::path manifest_path(const std::filesystem::path& p) {
    return std::filesystem::is_directory(p) ? p / "manifest.jsonl" : p;
}

/// Reads a manifest (or a directory holding manifest.jsonl) and its images.
/// Records whose caption, attributes or size disagree are a DataError.
inline std::vector<Sample> load_dataset(const std::filesystem::path& where) {
    const auto path = manifest_path(where);
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    const auto root = path.parent_path();
    std::vector<Sample> out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.empty()) continue;
        const std::string where_line = path.string() + ":" + std::to_string(n);
        try {
            const auto j = nlohmann::json::parse(line);
            Sample s;
            s.attrs = parse_caption(j.at("caption").get<std::string>());
            if (j.at("shape").get<std::string>() != kShapeNames[s.attrs.shape] ||
                j.at("color").get<std::string>() != kColors[s.attrs.color].name ||
                j.at("position").get<std::string>() != kPositionNames[s.attrs.position])
                throw DataError(where_line + ": attributes disagree with the caption");
            s.image = read_ppm(root / j.at("image").get<std::string>());
            if (s.image.width != j.at("width").get<std::size_t>() || s.image.height != j.at("height").get<std::size_t>())
                throw DataError(where_line + ": stored image size differs from the manifest");
            if (j.contains("hi_image")) s.high = read_ppm(root / j.at("hi_image").get<std::string>());
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where_line + ": " + e.what());
        } catch (const GrammarError& e) {
            throw DataError(where_line + ": " + e.what());
        }
    }
    if (out.empty()) throw DataError(path.string() + " holds no records");
    return out;
}

// ------------------------------------------------------------ donor text corpus

/// Line-oriented templated English: scene captions mixed with short
/// descriptive sentences. At least min_bytes long.
inline std::string make_text_corpus(std::size_t min_bytes, std::uint64_t seed) {
    static constexpr std::array<const char*, 10> nouns{"cat", "dog", "bird", "house", "tree",
                                                       "river", "child", "garden", "window", "boat"};
    static constexpr std::array<const char*, 8> verbs{"sees", "likes", "finds", "follows",
                                                      "paints", "watches", "draws", "keeps"};
    static constexpr std::array<const char*, 6> adjs{"small", "large", "old", "quiet", "bright", "round"};
    Rng rng(seed);
    auto pick = [&](const auto& arr) { return std::string(arr[rng.below(arr.size())]); };
    std::string out;
    while (out.size() < min_bytes) {
        std::string line;
        switch (rng.below(5)) {
            case 0:
            case 1: {
                Attributes a{rng.below(kShapeNames.size()), rng.below(kColors.size()), rng.below(kPositionNames.size())};
                line = render_caption(a);
                break;
            }
            case 2:
                line = "the " + pick(adjs) + " " + pick(nouns) + " " + pick(verbs) + " a " +
                       std::string(kColors[rng.below(kColors.size())].name) + " " + pick(kShapeNames);
                break;
            case 3:
                line = "the " + pick(nouns) + " " + pick(verbs) + " the " + pick(adjs) + " " + pick(nouns);
                break;
            default:
                line = "a " + std::string(kColors[rng.below(kColors.size())].name) + " " + pick(nouns) + " is at the " +
                       pick(kPositionNames);
                break;
        }
        out += line;
        out += '\n';
    }
    return out;
}

}  // namespace mars

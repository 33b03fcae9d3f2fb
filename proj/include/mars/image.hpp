#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mars/errors.hpp"

namespace mars {

/// H×W×3 image, channels interleaved, values in [0, 1].
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, float fill = 1.0f) : width(w), height(h), pixels(w * h * 3, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.pixels.size());
    for (float v : img.pixels) out.push_back(to_byte(v));
    return out;
}

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_uint = [&] {
        skip_space();
        std::size_t v = 0;
        std::size_t digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            ++digits;
        }
        if (!digits) throw FormatError("ppm: malformed header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: missing P6 magic");
    pos = 2;
    const std::size_t w = read_uint();
    const std::size_t h = read_uint();
    const std::size_t maxval = read_uint();
    if (maxval != 255) throw FormatError("ppm: only 8-bit channels are supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: malformed header");
    ++pos;
    if (w == 0 || h == 0) throw FormatError("ppm: empty image");
    if (bytes.size() - pos < w * h * 3) throw FormatError("ppm: truncated pixel data");
    Image img(w, h);
    for (std::size_t i = 0; i < w * h * 3; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    const auto bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_ppm(bytes);
}

}  // namespace mars

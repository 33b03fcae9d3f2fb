#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "mars/model.hpp"

namespace mars {

// Container: "SVCK", u32 LE version, u64 LE metadata length, JSON metadata,
// then each tensor's values as LE f32 in directory order.
inline constexpr char kCheckpointMagic[4] = {'S', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

inline void put_floats(std::vector<std::uint8_t>& out, std::span<const float> xs) {
    for (float x : xs) put_le(out, std::bit_cast<std::uint32_t>(x));
}

inline nlohmann::json config_json(const ModelConfig& c) {
    return {{"d", c.d},           {"heads", c.heads},       {"layers", c.layers},
            {"context", c.context}, {"ffn_mult", c.ffn_mult}, {"text_size", c.text_size}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.at("d").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
    c.text_size = j.at("text_size").get<std::size_t>();
    c.validate();
    return c;
}

inline std::vector<std::uint8_t> pack(const nlohmann::json& meta_base, const std::vector<NamedTensor>& tensors) {
    nlohmann::json meta = meta_base;
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        dir.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape()}, {"trainable", t.requires_grad()}});
        offset += 4 * t.numel();
    }
    meta["tensors"] = dir;
    const std::string text = meta.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : tensors) put_floats(out, t.data());
    return out;
}

struct Unpacked {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

inline Unpacked unpack(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic");
    const auto version = get_le<std::uint32_t>(bytes.data() + 4);
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto meta_len = get_le<std::uint64_t>(bytes.data() + 8);
    if (meta_len > bytes.size() - 16) throw FormatError("checkpoint: truncated metadata");
    Unpacked u;
    try {
        u.meta = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
    }
    const std::size_t base = 16 + meta_len;
    try {
        for (const auto& entry : u.meta.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            if (shape.empty() || shape.size() > 2) throw FormatError("checkpoint: tensor " + name + " has a bad shape");
            for (std::size_t e : shape)
                if (e == 0 || e > bytes.size()) throw FormatError("checkpoint: tensor " + name + " has a bad shape");
            const std::size_t n = shape_numel(shape);
            if (offset % 4 != 0 || offset > bytes.size() - base || n > (bytes.size() - base - offset) / 4)
                throw FormatError("checkpoint: tensor " + name + " runs past the end of the file");
            std::vector<float> data(n);
            const std::uint8_t* p = bytes.data() + base + offset;
            for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
            if (!u.tensors.emplace(name, Tensor(shape, std::move(data), entry.value("trainable", false))).second)
                throw SchemaError("checkpoint: duplicate tensor " + name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed tensor directory: ") + e.what());
    }
    return u;
}

// Moves every tensor named in `slots` out of u; leftovers are unknown names.
inline void bind(Unpacked& u, std::vector<std::pair<std::string, Tensor*>> slots) {
    for (auto& [name, dst] : slots) {
        auto it = u.tensors.find(name);
        if (it == u.tensors.end()) throw SchemaError("checkpoint: missing tensor " + name);
        *dst = it->second;
        u.tensors.erase(it);
    }
    if (!u.tensors.empty()) throw SchemaError("checkpoint: unknown tensor " + u.tensors.begin()->first);
}

inline void bind_expert(std::vector<std::pair<std::string, Tensor*>>& s, const std::string& p, ExpertParams& e) {
    s.emplace_back(p + ".wq", &e.wq);
    s.emplace_back(p + ".wk", &e.wk);
    s.emplace_back(p + ".wv", &e.wv);
    s.emplace_back(p + ".wo", &e.wo);
    s.emplace_back(p + ".w1", &e.w1);
    s.emplace_back(p + ".w2", &e.w2);
}

inline void bind_layer_norms(std::vector<std::pair<std::string, Tensor*>>& s, const std::string& p, LayerParams& l) {
    s.emplace_back(p + ".ln1.gamma", &l.ln1_gamma);
    s.emplace_back(p + ".ln1.beta", &l.ln1_beta);
    s.emplace_back(p + ".ln2.gamma", &l.ln2_gamma);
    s.emplace_back(p + ".ln2.beta", &l.ln2_beta);
}

inline void check_shape(const Tensor& t, Shape want, const std::string& name) {
    if (t.shape() != want)
        throw SchemaError("checkpoint: tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(want));
}

inline void check_text_stack(const ModelConfig& c, const std::vector<LayerParams>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto p = "layers." + std::to_string(i);
        const auto& l = layers[i];
        for (const Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta}) check_shape(*t, {c.d}, p + ".ln");
        for (const ExpertParams* e : {&l.text, &l.vision}) {
            if (!e->defined()) continue;
            for (const Tensor* t : {&e->wq, &e->wk, &e->wv, &e->wo}) check_shape(*t, {c.d, c.d}, p + ".w");
            check_shape(e->w1, {c.d, c.ffn_hidden()}, p + ".w1");
            check_shape(e->w2, {c.ffn_hidden(), c.d}, p + ".w2");
        }
    }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

}  // namespace detail

// ------------------------------------------------------------ text LM

inline std::vector<std::uint8_t> serialize(const TextLm& lm) {
    nlohmann::json meta{{"kind", "text_lm"}, {"config", detail::config_json(lm.config)}};
    return detail::pack(meta, lm.named_parameters());
}

inline TextLm deserialize_text_lm(const std::vector<std::uint8_t>& bytes) {
    auto u = detail::unpack(bytes);
    if (u.meta.value("kind", "") != "text_lm") throw SchemaError("checkpoint does not hold a text LM");
    TextLm lm;
    try {
        lm.config = detail::config_from_json(u.meta.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint: bad config: ") + e.what());
    }
    const auto& c = lm.config;
    lm.layers.resize(c.layers);
    std::vector<std::pair<std::string, Tensor*>> s{{"embed", &lm.embed}, {"pos", &lm.pos}};
    for (std::size_t i = 0; i < c.layers; ++i) {
        const auto p = "layers." + std::to_string(i);
        detail::bind_layer_norms(s, p, lm.layers[i]);
        detail::bind_expert(s, p + ".text", lm.layers[i].text);
    }
    s.emplace_back("final.gamma", &lm.final_gamma);
    s.emplace_back("final.beta", &lm.final_beta);
    s.emplace_back("head", &lm.head);
    detail::bind(u, s);
    detail::check_shape(lm.embed, {c.text_vocab(), c.d}, "embed");
    detail::check_shape(lm.pos, {c.context, c.d}, "pos");
    detail::check_shape(lm.head, {c.d, c.text_vocab()}, "head");
    detail::check_text_stack(c, lm.layers);
    return lm;
}

// ------------------------------------------------------------ SemVIE

inline std::vector<std::uint8_t> serialize(const SemVieModel& m) {
    const auto& l = m.layout();
    nlohmann::json meta{{"kind", "semvie"},
                        {"config", detail::config_json(m.config)},
                        {"vocab",
                         {{"text_size", l.text_size},
                          {"visual_size", l.visual_size},
                          {"special_names", l.special_names},
                          {"total_size", l.total_size()}}},
                        {"codebook", {{"patch_size", m.vocab.codebook.patch_size}, {"size", m.vocab.codebook.size}}},
                        {"block_k", m.block_k()},
                        {"provenance", m.provenance}};
    auto tensors = m.named_parameters();
    const auto& cb = m.vocab.codebook;
    tensors.emplace_back("codebook", Tensor({cb.size, cb.dim()}, cb.codewords));
    return detail::pack(meta, tensors);
}

inline SemVieModel deserialize_semvie(const std::vector<std::uint8_t>& bytes) {
    auto u = detail::unpack(bytes);
    if (u.meta.value("kind", "") != "semvie") throw SchemaError("checkpoint does not hold a SemVIE model");
    SemVieModel m;
    std::size_t k = 0;
    try {
        m.config = detail::config_from_json(u.meta.at("config"));
        const auto& v = u.meta.at("vocab");
        m.vocab.layout.text_size = v.at("text_size").get<std::size_t>();
        m.vocab.layout.visual_size = v.at("visual_size").get<std::size_t>();
        m.vocab.layout.special_names = v.at("special_names").get<std::array<std::string, kSpecialCount>>();
        m.vocab.codebook.patch_size = u.meta.at("codebook").at("patch_size").get<std::size_t>();
        m.vocab.codebook.size = u.meta.at("codebook").at("size").get<std::size_t>();
        k = u.meta.at("block_k").get<std::size_t>();
        m.provenance = u.meta.at("provenance").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint: bad metadata: ") + e.what());
    }
    const auto& c = m.config;
    if (m.vocab.layout.text_size != c.text_size) throw SchemaError("checkpoint: vocabulary and config disagree");
    if (k == 0) throw SchemaError("checkpoint: no vision head");
    m.layers.resize(c.layers);
    m.head_vision.resize(k);
    Tensor codebook;
    std::vector<std::pair<std::string, Tensor*>> s{{"embed.text", &m.embed_text},
                                                   {"embed.special", &m.embed_special},
                                                   {"embed.visual", &m.embed_visual},
                                                   {"pos", &m.pos}};
    for (std::size_t i = 0; i < c.layers; ++i) {
        const auto p = "layers." + std::to_string(i);
        detail::bind_layer_norms(s, p, m.layers[i]);
        detail::bind_expert(s, p + ".text", m.layers[i].text);
        detail::bind_expert(s, p + ".vision", m.layers[i].vision);
    }
    s.emplace_back("final.gamma", &m.final_gamma);
    s.emplace_back("final.beta", &m.final_beta);
    s.emplace_back("head.text", &m.head_text);
    for (std::size_t i = 0; i < k; ++i) s.emplace_back("head.vision." + std::to_string(i), &m.head_vision[i]);
    s.emplace_back("codebook", &codebook);
    detail::bind(u, s);

    auto& cb = m.vocab.codebook;
    detail::check_shape(codebook, {cb.size, cb.dim()}, "codebook");
    cb.codewords.assign(codebook.data().begin(), codebook.data().end());
    cb.validate();
    if (cb.size != m.vocab.layout.visual_size) throw SchemaError("checkpoint: codebook size differs from the vocabulary");
    const std::size_t d = c.d;
    detail::check_shape(m.embed_text, {c.text_size, d}, "embed.text");
    detail::check_shape(m.embed_special, {kSpecialCount, d}, "embed.special");
    detail::check_shape(m.embed_visual, {cb.size, d}, "embed.visual");
    detail::check_shape(m.pos, {c.context, d}, "pos");
    detail::check_shape(m.head_text, {d, c.text_vocab()}, "head.text");
    for (const auto& h : m.head_vision) detail::check_shape(h, {d, cb.size}, "head.vision");
    detail::check_text_stack(c, m.layers);
    m.vocab.width = d;
    const Tensor table = concat_rows<float>({m.embed_text, m.embed_special, m.embed_visual});
    m.vocab.embedding.assign(table.data().begin(), table.data().end());
    return m;
}

inline void save_checkpoint(const TextLm& lm, const std::filesystem::path& path) {
    detail::write_file(path, serialize(lm));
}
inline void save_checkpoint(const SemVieModel& m, const std::filesystem::path& path) {
    detail::write_file(path, serialize(m));
}
inline TextLm load_text_lm(const std::filesystem::path& path) { return deserialize_text_lm(detail::read_file(path)); }
inline SemVieModel load_semvie(const std::filesystem::path& path) { return deserialize_semvie(detail::read_file(path)); }

/// "text_lm" or "semvie".
inline std::string checkpoint_kind(const std::filesystem::path& path) {
    const auto u = detail::unpack(detail::read_file(path));
    return u.meta.value("kind", "");
}

// ------------------------------------------------------------ hashing

/// SHA-256 over name, shape and LE f32 values of every tensor, hex encoded.
inline std::string tensor_hash(const std::vector<NamedTensor>& tensors) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 unavailable");
    std::vector<std::uint8_t> buf;
    for (const auto& [name, t] : tensors) {
        buf.clear();
        detail::put_le<std::uint64_t>(buf, name.size());
        buf.insert(buf.end(), name.begin(), name.end());
        detail::put_le<std::uint64_t>(buf, t.shape().size());
        for (auto e : t.shape()) detail::put_le<std::uint64_t>(buf, e);
        detail::put_floats(buf, t.data());
        EVP_DigestUpdate(ctx.get(), buf.data(), buf.size());
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string frozen_hash(const SemVieModel& m) { return tensor_hash(m.frozen_parameters()); }

}  // namespace mars

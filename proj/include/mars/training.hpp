#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mars/checkpoint.hpp"
#include "mars/dataset.hpp"
#include "mars/objectives.hpp"
#include "mars/optimizer.hpp"

namespace mars {

// ------------------------------------------------------------ configuration

struct LmTrainConfig {
    std::size_t steps = 800;  // budget; training stops earlier once target_loss is reached
    double peak_lr = 3e-3;
    double warmup_ratio = 0.05;
    std::size_t batch_size = 4;
    double weight_decay = 0.0;
    double target_loss = 2.0;    // per byte, averaged over the last `window` steps
    std::size_t window = 20;
    std::size_t eval_windows = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps == 0) throw ConfigError("lm.steps must be at least 1");
        if (!(peak_lr > 0)) throw ConfigError("lm.peak_lr must be positive");
        if (!(warmup_ratio > 0 && warmup_ratio < 1)) throw ConfigError("lm.warmup_ratio must lie in (0, 1)");
        if (batch_size == 0) throw ConfigError("lm.batch_size must be at least 1");
        if (window == 0 || eval_windows == 0) throw ConfigError("lm.window and lm.eval_windows must be positive");
    }
};

struct CodebookConfig {
    std::size_t patch_size = 8;
    std::size_t size = 64;
    std::size_t iters = 20;
    std::uint64_t seed = 0;

    void validate() const {
        if (patch_size == 0 || size == 0 || iters == 0) throw ConfigError("codebook fields must be positive");
    }
};

struct StageConfig {
    int stage = 1;
    std::size_t epochs = 1;
    double peak_lr = 1e-4;
    double warmup_ratio = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    std::size_t batch_size = 1;
    std::optional<std::size_t> k;  // block size, Stage III only
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_steps;
    std::size_t eval_records = 64;  // loss before/after is measured on the first records
    double caption_ratio = 0.5;     // Stage I share of captioning sequences

    /// Epoch counts 1/2/1 and K=4 for the cascade.
    static StageConfig defaults(int stage) {
        check_stage(stage);
        StageConfig c;
        c.stage = stage;
        c.epochs = stage == 2 ? 2 : 1;
        if (stage == 3) c.k = 4;
        return c;
    }

    void validate() const {
        check_stage(stage);
        if (epochs == 0) throw ConfigError("epochs must be at least 1");
        if (!(warmup_ratio > 0 && warmup_ratio < 1)) throw ConfigError("warmup_ratio must lie in (0, 1)");
        if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
        if (k.has_value() != (stage == 3)) throw ConfigError("K is required for stage 3 and only there");
        if (k && *k == 0) throw ConfigError("K must be at least 1");
        if (eval_records == 0) throw ConfigError("eval_records must be at least 1");
        if (!(caption_ratio >= 0 && caption_ratio <= 1)) throw ConfigError("caption_ratio must lie in [0, 1]");
        if (max_steps && *max_steps == 0) throw ConfigError("max_steps must be at least 1");
        AdamWConfig{beta1, beta2, 1e-8, weight_decay, clip_norm}.validate();
    }

    AdamWConfig adamw() const { return {beta1, beta2, 1e-8, weight_decay, clip_norm}; }
};

/// Everything a CLI run reads from one JSON document.
struct RunConfig {
    ModelConfig model;
    CodebookConfig codebook;
    LmTrainConfig lm;
    std::optional<StageConfig> stage;
};

namespace detail {

template <class V>
struct is_optional : std::false_type {};
template <class V>
struct is_optional<std::optional<V>> : std::true_type {};

// Reads the keys present in j into fields; unknown keys are an error so
// typos do not silently fall back to defaults.
class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    }

    template <class V>
    JsonReader& get(const char* key, V& out) {
        seen_.push_back(key);
        if (!j_.contains(key)) return *this;
        try {
            if constexpr (is_optional<V>::value) {
                if (j_.at(key).is_null()) {
                    out.reset();
                } else {
                    out = j_.at(key).template get<typename V::value_type>();
                }
            } else {
                out = j_.at(key).template get<V>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
        return *this;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
                throw ConfigError("unknown key " + where_ + "." + key);
        }
    }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    detail::JsonReader r(j, "model");
    r.get("d", c.d).get("heads", c.heads).get("layers", c.layers).get("context", c.context);
    r.get("ffn_mult", c.ffn_mult).get("text_size", c.text_size).finish();
    c.validate();
    return c;
}

inline StageConfig stage_config_from_json(const nlohmann::json& j) {
    int stage = 1;
    if (!j.is_object()) throw ConfigError("stage must be a JSON object");
    if (j.contains("stage")) {
        if (!j.at("stage").is_number_integer()) throw ConfigError("stage.stage must be 1, 2 or 3");
        stage = j.at("stage").get<int>();
    }
    StageConfig c = StageConfig::defaults(stage);
    detail::JsonReader r(j, "stage");
    r.get("stage", c.stage).get("epochs", c.epochs).get("peak_lr", c.peak_lr).get("warmup_ratio", c.warmup_ratio);
    r.get("beta1", c.beta1).get("beta2", c.beta2).get("weight_decay", c.weight_decay).get("clip_norm", c.clip_norm);
    r.get("batch_size", c.batch_size).get("K", c.k).get("seed", c.seed).get("max_steps", c.max_steps);
    r.get("eval_records", c.eval_records).get("caption_ratio", c.caption_ratio).finish();
    c.validate();
    return c;
}

inline nlohmann::json to_json(const StageConfig& c) {
    nlohmann::json j{{"stage", c.stage},         {"epochs", c.epochs},
                     {"peak_lr", c.peak_lr},     {"warmup_ratio", c.warmup_ratio},
                     {"beta1", c.beta1},         {"beta2", c.beta2},
                     {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm},
                     {"batch_size", c.batch_size}, {"seed", c.seed},
                     {"eval_records", c.eval_records}, {"caption_ratio", c.caption_ratio}};
    j["K"] = c.k ? nlohmann::json(*c.k) : nlohmann::json(nullptr);
    j["max_steps"] = c.max_steps ? nlohmann::json(*c.max_steps) : nlohmann::json(nullptr);
    return j;
}

/// {"model": {...}, "codebook": {...}, "lm": {...}, "stage": {...}}; every
/// section is optional.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::JsonReader top(j, "config");
    nlohmann::json model, codebook, lm, stage;
    top.get("model", model).get("codebook", codebook).get("lm", lm).get("stage", stage).finish();
    if (!model.is_null()) c.model = model_config_from_json(model);
    if (!codebook.is_null()) {
        detail::JsonReader r(codebook, "codebook");
        r.get("patch_size", c.codebook.patch_size).get("size", c.codebook.size).get("iters", c.codebook.iters);
        r.get("seed", c.codebook.seed).finish();
        c.codebook.validate();
    }
    if (!lm.is_null()) {
        detail::JsonReader r(lm, "lm");
        r.get("steps", c.lm.steps).get("peak_lr", c.lm.peak_lr).get("warmup_ratio", c.lm.warmup_ratio);
        r.get("batch_size", c.lm.batch_size).get("weight_decay", c.lm.weight_decay);
        r.get("target_loss", c.lm.target_loss).get("window", c.lm.window).get("eval_windows", c.lm.eval_windows);
        r.get("seed", c.lm.seed).finish();
        c.lm.validate();
    }
    if (!stage.is_null()) c.stage = stage_config_from_json(stage);
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

// ------------------------------------------------------------ donor pretraining

/// Corpus lines as bytes, each followed by <eos>.
inline std::vector<TokenId> corpus_stream(std::string_view corpus) {
    std::vector<TokenId> out;
    const auto eos = static_cast<TokenId>(kByteVocab + static_cast<std::size_t>(Special::eos));
    std::size_t start = 0;
    while (start < corpus.size()) {
        std::size_t end = corpus.find('\n', start);
        if (end == std::string_view::npos) end = corpus.size();
        for (TokenId id : encode_text(corpus.substr(start, end - start))) out.push_back(id);
        out.push_back(eos);
        start = end + 1;
    }
    return out;
}

struct LmStepRecord {
    std::size_t step = 0;
    double lr = 0;
    double loss = 0;  // per byte, this batch
    double grad_norm = 0;
};

struct LmTrainReport {
    double initial_loss = 0;  // per byte on the fixed evaluation windows
    double final_loss = 0;
    std::size_t steps = 0;
    bool reached_target = false;
    std::vector<LmStepRecord> log;
};

namespace detail {

inline Tensor lm_window_loss(const TextLm& lm, std::span<const TokenId> window) {
    std::vector<std::int64_t> targets(window.size());
    for (std::size_t t = 0; t + 1 < window.size(); ++t) targets[t] = window[t + 1];
    targets.back() = -1;
    return cross_entropy_rows(lm.logits(window), targets);
}

}  // namespace detail

/// Trains a fresh byte-level LM on random context windows of the corpus
/// stream until the running loss drops below target_loss or the step budget
/// ends. The returned model has no gradient buffers.
inline TextLm pretrain_text_lm(std::string_view corpus, const ModelConfig& model_cfg, const LmTrainConfig& cfg,
                               LmTrainReport* report = nullptr,
                               const std::function<void(const LmStepRecord&)>& on_step = {}) {
    cfg.validate();
    model_cfg.validate();
    const std::vector<TokenId> stream = corpus_stream(corpus);
    const std::size_t n = model_cfg.context;
    if (stream.size() < n)
        throw DataError("corpus gives " + std::to_string(stream.size()) + " tokens, fewer than one context window of " +
                        std::to_string(n));
    const std::size_t starts = stream.size() - n + 1;
    TextLm lm = TextLm::init(model_cfg, cfg.seed);
    lm.set_trainable(true);
    Rng rng(cfg.seed ^ 0x5eedULL);

    // fixed evaluation windows, evenly spaced
    auto eval = [&] {
        const std::size_t count = std::min(cfg.eval_windows, starts);
        double total = 0;
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t s = count == 1 ? 0 : i * (starts - 1) / (count - 1);
            total += detail::lm_window_loss(lm, std::span(stream).subspan(s, n)).item();
        }
        return total / static_cast<double>(count * (n - 1));
    };

    LmTrainReport rep;
    rep.initial_loss = eval();
    AdamWConfig acfg;
    acfg.weight_decay = cfg.weight_decay;
    AdamW opt(lm.named_parameters(), acfg, WarmupSchedule::from_ratio(cfg.peak_lr, cfg.warmup_ratio, cfg.steps));
    std::vector<double> recent;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        double loss = 0;
        const double denom = static_cast<double>(cfg.batch_size * (n - 1));
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t s = rng.below(starts);
            Tensor l = detail::lm_window_loss(lm, std::span(stream).subspan(s, n));
            loss += l.item();
            scale(l, static_cast<float>(1.0 / denom)).backward();
        }
        opt.step();
        LmStepRecord rec{opt.steps(), opt.last_lr(), loss / denom, opt.last_grad_norm()};
        rep.log.push_back(rec);
        if (on_step) on_step(rec);
        recent.push_back(rec.loss);
        if (recent.size() > cfg.window) recent.erase(recent.begin());
        if (recent.size() == cfg.window) {
            double mean = 0;
            for (double v : recent) mean += v;
            if (mean / static_cast<double>(recent.size()) < cfg.target_loss) {
                rep.reached_target = true;
                break;
            }
        }
    }
    rep.steps = opt.steps();
    rep.final_loss = eval();
    lm.set_trainable(false);
    if (report) *report = std::move(rep);
    return lm;
}

// ------------------------------------------------------------ codebook

/// k-means codebook over every patch of the given images.
inline VisualCodebook build_codebook(const std::vector<Sample>& samples, const CodebookConfig& cfg) {
    cfg.validate();
    if (samples.empty()) throw DataError("codebook needs at least one image");
    std::vector<float> patches;
    for (const Sample& s : samples) {
        const auto p = extract_patches(s.image, cfg.patch_size);
        patches.insert(patches.end(), p.begin(), p.end());
    }
    return train_codebook(patches, 3 * cfg.patch_size * cfg.patch_size, cfg.size, cfg.iters, cfg.seed);
}

// ------------------------------------------------------------ stage data

/// Throws ConfigError when a record does not have the stage's geometry.
inline void check_stage_record(const Sample& s, int stage, std::size_t index) {
    const auto where = "record " + std::to_string(index) + ": ";
    const std::size_t w = s.image.width, h = s.image.height, m = StageGeometry::kMinSide;
    switch (stage) {
        case 1:
            if (w != m || h != m) throw ConfigError(where + "stage 1 expects 32x32 images");
            if (s.high) throw ConfigError(where + "stage 1 records carry no high-resolution image");
            break;
        case 2:
            if (std::min(w, h) != m) throw ConfigError(where + "stage 2 expects a minor side of 32 pixels");
            if (s.high) throw ConfigError(where + "stage 2 records carry no high-resolution image");
            break;
        case 3:
            if (!s.high) throw ConfigError(where + "stage 3 needs (low, caption, high) triplets");
            if (w != m || h != m) throw ConfigError(where + "stage 3 expects a 32x32 low-resolution image");
            break;
        default:
            check_stage(stage);
    }
}

/// Training sequences for a stage. Stage I mixes text-to-image and
/// captioning (a seeded coin per record); Stage II is resolution-tagged
/// text-to-image; Stage III is the (low, caption) → high cascade. Only the
/// generated span is supervised.
inline std::vector<TokenSequence> stage_sequences(const SemVieModel& model, const std::vector<Sample>& samples,
                                                  const StageConfig& cfg) {
    cfg.validate();
    if (samples.empty()) throw DataError("stage dataset is empty");
    const auto& lay = model.layout();
    const auto& cb = model.vocab.codebook;
    Rng coin(cfg.seed ^ 0xc0ffeeULL);
    std::vector<TokenSequence> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        check_stage_record(s, cfg.stage, i);
        const TokenGrid grid = quantize_image(s.image, cb);
        TokenSequence seq;
        if (cfg.stage == 3) {
            seq = superres_sequence(lay, s.caption(), grid, quantize_image(*s.high, cb), cb.patch_size,
                                    Supervision::image_only);
        } else if (cfg.stage == 1 && coin.uniform() < cfg.caption_ratio) {
            seq = caption_sequence(lay, grid, s.caption(), Supervision::image_only);
        } else {
            seq = t2i_sequence(lay, s.caption(), s.image.height, s.image.width, grid, Supervision::image_only);
        }
        if (seq.size() > model.config.context)
            throw ContextLengthError("record " + std::to_string(i) + " needs " + std::to_string(seq.size()) +
                                     " positions, context is " + std::to_string(model.config.context));
        out.push_back(std::move(seq));
    }
    return out;
}

// ------------------------------------------------------------ stage runs

struct StepRecord {
    int stage = 0;
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0;
    double loss = 0;              // per supervised token, this batch
    std::size_t tokens = 0;       // supervised tokens in the batch
    std::size_t predictions = 0;  // auto-regressive steps in the batch
    double grad_norm = 0;
};

inline nlohmann::json to_json(const StepRecord& r) {
    return {{"event", "step"},  {"stage", r.stage},   {"epoch", r.epoch},
            {"step", r.step},   {"lr", r.lr},         {"loss", r.loss},
            {"tokens", r.tokens}, {"predictions", r.predictions}, {"grad_norm", r.grad_norm}};
}

struct StageReport {
    int stage = 0;
    std::size_t steps = 0;
    double initial_loss = 0;  // per token on the evaluation subset, before the first update
    double final_loss = 0;    // same subset after the last update
    std::string frozen_hash_before;
    std::string frozen_hash_after;
    std::vector<StepRecord> log;
};

inline nlohmann::json to_json(const StageReport& r) {
    return {{"event", "stage_done"},
            {"stage", r.stage},
            {"steps", r.steps},
            {"initial_loss", r.initial_loss},
            {"final_loss", r.final_loss},
            {"frozen_hash_before", r.frozen_hash_before},
            {"frozen_hash_after", r.frozen_hash_after}};
}

namespace detail {

inline LossResult stage_loss(const SemVieModel& m, const TokenSequence& seq, const StageConfig& cfg) {
    return cfg.stage == 3 ? nktp_loss(m, seq, *cfg.k) : ntp_loss(m, seq);
}

inline double mean_loss(const SemVieModel& m, const std::vector<TokenSequence>& seqs, std::size_t count,
                        const StageConfig& cfg) {
    double total = 0;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < std::min(count, seqs.size()); ++i) {
        const LossResult r = stage_loss(m, seqs[i], cfg);
        total += r.total.item();
        tokens += r.count;
    }
    return total / static_cast<double>(tokens);
}

}  // namespace detail

/// Trains `model` in place for one stage. Optimizer state starts fresh.
/// `stop`, when given, is polled after every step and ends training early.
/// Stage III first grows the vision head to K block heads when needed.
inline StageReport run_stage(SemVieModel& model, const StageConfig& cfg, const std::vector<Sample>& samples,
                             const std::function<void(const StepRecord&)>& on_step = {},
                             const std::function<bool()>& stop = {}) {
    cfg.validate();
    if (cfg.stage == 3 && model.block_k() != *cfg.k) model.set_block_heads(*cfg.k);
    const std::vector<TokenSequence> seqs = stage_sequences(model, samples, cfg);

    StageReport rep;
    rep.stage = cfg.stage;
    rep.frozen_hash_before = frozen_hash(model);
    rep.initial_loss = detail::mean_loss(model, seqs, cfg.eval_records, cfg);

    const std::size_t per_epoch = (seqs.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total = per_epoch * cfg.epochs;
    if (cfg.max_steps) total = std::min(total, *cfg.max_steps);
    AdamW opt(model.trainable_parameters(), cfg.adamw(), WarmupSchedule::from_ratio(cfg.peak_lr, cfg.warmup_ratio, total));

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(seqs.size());
    bool halted = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && opt.steps() < total && !halted; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t b = 0; b < per_epoch && opt.steps() < total && !halted; ++b) {
            const std::size_t lo = b * cfg.batch_size, hi = std::min(lo + cfg.batch_size, order.size());
            std::size_t tokens = 0;
            for (std::size_t i = lo; i < hi; ++i)
                tokens += static_cast<std::size_t>(std::count(seqs[order[i]].loss_mask.begin(),
                                                              seqs[order[i]].loss_mask.end(), true));
            opt.zero_grad();
            StepRecord rec;
            rec.stage = cfg.stage;
            rec.epoch = epoch;
            double loss = 0;
            // batch loss = Σ NLL / Σ supervised tokens, accumulated one sequence at a time
            for (std::size_t i = lo; i < hi; ++i) {
                const LossResult r = detail::stage_loss(model, seqs[order[i]], cfg);
                loss += r.total.item();
                rec.predictions += r.steps;
                scale(r.total, 1.0f / static_cast<float>(tokens)).backward();
            }
            opt.step();
            rec.step = opt.steps();
            rec.lr = opt.last_lr();
            rec.loss = loss / static_cast<double>(tokens);
            rec.tokens = tokens;
            rec.grad_norm = opt.last_grad_norm();
            rep.log.push_back(rec);
            if (on_step) on_step(rec);
            if (stop && stop()) halted = true;
        }
    }
    opt.zero_grad();
    rep.steps = opt.steps();
    rep.final_loss = detail::mean_loss(model, seqs, cfg.eval_records, cfg);
    rep.frozen_hash_after = frozen_hash(model);
    model.provenance.push_back("stage" + std::to_string(cfg.stage));
    return rep;
}

}  // namespace mars

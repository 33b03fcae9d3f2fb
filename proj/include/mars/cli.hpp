#pragma once

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mars/checkpoint.hpp"
#include "mars/dataset.hpp"
#include "mars/eval.hpp"
#include "mars/training.hpp"

namespace mars::cli {

// Metrics go to `out` as JSON lines, human-readable progress to `err`.
struct Io {
    std::ostream& out;
    std::ostream& err;

    void emit(const nlohmann::json& j) const { out << j.dump() << '\n' << std::flush; }
    void log(const std::string& msg) const { err << "mars: " << msg << '\n' << std::flush; }
};

/// Stage a dataset was generated for: triplets are Stage III, any non-square
/// image is Stage II.
inline int infer_stage(const std::vector<Sample>& samples) {
    bool variable = false;
    for (const auto& s : samples) {
        if (s.high) return 3;
        variable = variable || s.image.width != s.image.height || s.image.width != StageGeometry::kMinSide;
    }
    return variable ? 2 : 1;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct DecodeFlags {
    std::uint64_t seed = 0;
    float temperature = 1.0f;
    std::size_t top_k = 0;  // 0 means no top-k filter

    void add(CLI::App* app) {
        app->add_option("--seed", seed, "sampling seed");
        app->add_option("--temperature", temperature, "softmax temperature; 0 decodes greedily");
        app->add_option("--top-k", top_k, "keep only the k most likely ids (0 = all)");
    }

    DecodeParams params() const {
        DecodeParams p;
        p.seed = seed;
        p.temperature = temperature;
        if (top_k) p.top_k = top_k;
        return p;
    }
};

inline int cmd_dataset(const Io& io, std::size_t n, std::uint64_t seed, int stage, const std::string& out, bool distinct) {
    if (n == 0) throw ConfigError("--n must be at least 1");
    const auto samples = distinct ? distinct_samples(n, seed, stage) : synthesize(n, seed, stage);
    write_dataset(out, samples);
    io.log("wrote " + std::to_string(samples.size()) + " stage " + std::to_string(stage) + " records to " + out);
    io.emit({{"event", "dataset"}, {"records", samples.size()}, {"stage", stage}, {"manifest", manifest_path(out).string()}});
    return 0;
}

inline int cmd_corpus(const Io& io, std::size_t bytes, std::uint64_t seed, const std::string& out) {
    const std::string text = make_text_corpus(bytes, seed);
    std::ofstream f(out, std::ios::binary);
    if (!f) throw DataError("cannot write " + out);
    f << text;
    io.emit({{"event", "corpus"}, {"bytes", text.size()}, {"path", out}});
    return 0;
}

inline int cmd_pretrain(const Io& io, const std::string& corpus_path, const std::string& config, const std::string& out) {
    const RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    const std::string corpus = read_text_file(corpus_path);
    io.log("pretraining donor LM on " + std::to_string(corpus.size()) + " bytes");
    LmTrainReport rep;
    const TextLm lm = pretrain_text_lm(corpus, cfg.model, cfg.lm, &rep, [&](const LmStepRecord& r) {
        io.emit({{"event", "lm_step"}, {"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"grad_norm", r.grad_norm}});
    });
    save_checkpoint(lm, out);
    io.log("saved donor to " + out);
    io.emit({{"event", "lm_done"},
             {"steps", rep.steps},
             {"initial_loss", rep.initial_loss},
             {"final_loss", rep.final_loss},
             {"reached_target", rep.reached_target},
             {"checkpoint", out}});
    return 0;
}

inline int cmd_train(const Io& io, int stage, const std::string& config, const std::string& data, const std::string& init,
                     const std::string& out) {
    const RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    if (cfg.stage && cfg.stage->stage != stage)
        throw ConfigError("config is for stage " + std::to_string(cfg.stage->stage) + " but --stage is " +
                          std::to_string(stage));
    const StageConfig sc = cfg.stage ? *cfg.stage : StageConfig::defaults(stage);
    const auto samples = load_dataset(data);
    io.log("loaded " + std::to_string(samples.size()) + " records from " + data);

    SemVieModel model;
    if (checkpoint_kind(init) == "text_lm") {
        if (stage != 1) throw ConfigError("stage " + std::to_string(stage) + " starts from a SemVIE checkpoint");
        const TextLm donor = load_text_lm(init);
        io.log("training the visual codebook on " + std::to_string(samples.size()) + " images");
        model = init_from_text_lm(donor, build_codebook(samples, cfg.codebook), donor.config, sc.seed);
    } else {
        model = load_semvie(init);
    }
    const StageReport rep = run_stage(model, sc, samples, [&](const StepRecord& r) { io.emit(to_json(r)); });
    save_checkpoint(model, out);
    io.log("stage " + std::to_string(stage) + " done, saved " + out);
    auto j = to_json(rep);
    j["checkpoint"] = out;
    io.emit(j);
    return rep.frozen_hash_before == rep.frozen_hash_after ? 0 : 1;
}

inline int cmd_generate(const Io& io, const std::string& ckpt, const std::string& prompt, std::size_t width,
                        std::size_t height, const DecodeFlags& flags, const std::string& out) {
    const SemVieModel model = load_semvie(ckpt);
    const GeneratedImage g = generate_image(model, prompt, height, width, flags.params());
    write_ppm(out, g.image);
    io.emit({{"event", "generate"}, {"prompt", prompt}, {"width", width}, {"height", height},
             {"tokens", g.grid.codes}, {"out", out}});
    return 0;
}

inline int cmd_superres(const Io& io, const std::string& ckpt, const std::string& low, const std::string& prompt,
                        std::size_t k, std::size_t long_side, const DecodeFlags& flags, const std::string& out) {
    const SemVieModel model = load_semvie(ckpt);
    const TokenGrid grid = quantize_image(read_ppm(low), model.vocab.codebook);
    const TokenGrid hi = super_resolve(model, grid, prompt, k ? k : model.block_k(), flags.params(), long_side);
    const Image img = dequantize_tokens(hi.codes, model.vocab.codebook, hi.grid_h, hi.grid_w);
    write_ppm(out, img);
    io.emit({{"event", "superres"}, {"prompt", prompt}, {"width", img.width}, {"height", img.height},
             {"tokens", hi.codes}, {"out", out}});
    return 0;
}

inline int cmd_eval(const Io& io, const std::string& ckpt, const std::string& data, const std::vector<std::string>& metrics,
                    const DecodeFlags& flags, std::size_t limit) {
    const SemVieModel model = load_semvie(ckpt);
    auto samples = load_dataset(data);
    if (limit && samples.size() > limit) samples.resize(limit);
    EvalReport rep;
    rep.samples = samples.size();
    for (const auto& m : metrics) {
        if (m == "ppl") {
            StageConfig sc = StageConfig::defaults(infer_stage(samples));
            if (sc.k) sc.k = model.block_k();
            const Perplexity p = eval_perplexity(model, stage_sequences(model, samples, sc));
            rep.text_perplexity = p.text;
            rep.vision_perplexity = p.vision;
        } else if (m == "align") {
            std::vector<std::string> prompts;
            for (const auto& s : samples) prompts.push_back(s.caption());
            const EvalReport a = eval_alignment_accuracy(model, prompts, flags.params());
            rep.alignment = a.alignment;
            rep.color = a.color;
            rep.shape = a.shape;
            rep.position = a.position;
        } else {
            throw ConfigError("unknown metric " + m + " (expected ppl or align)");
        }
    }
    io.emit(to_json(rep));
    return 0;
}

inline int cmd_gradcheck(const Io& io, const std::string& config, std::size_t length, std::uint64_t seed) {
    ModelConfig mc;
    mc.d = 8;
    mc.heads = 2;
    mc.layers = 2;
    mc.context = length;
    if (!config.empty()) mc = load_run_config(config).model;
    const GradCheckFixture f = gradcheck_fixture(mc, length, seed);
    const GradCheckResult r = ntp_gradient_check(f.model, f.sequence);
    const bool pass = r.max_rel_error < 1e-3;
    io.emit({{"event", "gradcheck"},
             {"max_rel_error", r.max_rel_error},
             {"checked", r.checked},
             {"worst_param", r.worst_param},
             {"worst_index", r.worst_index},
             {"pass", pass}});
    return pass ? 0 : 1;
}

/// Entry point for the `mars` tool. Returns 0 on success, 2 on a usage
/// error and 1 when the command itself fails.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    const Io io{out, err};
    CLI::App app{"Modality-routed text-to-image transformer toolkit", "mars"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    std::size_t n = 0, bytes = 200000, width = 32, height = 32, k = 0, long_side = 64, limit = 0, length = 12;
    std::uint64_t seed = 0;
    int stage = 1;
    bool distinct = false;
    std::string out_path, corpus, config, data, init, ckpt, prompt, low;
    std::vector<std::string> metrics{"ppl", "align"};
    DecodeFlags decode;

    auto* ds = app.add_subcommand("dataset", "write a synthetic caption/image dataset");
    ds->add_option("--n", n, "number of records")->required();
    ds->add_option("--seed", seed, "generator seed");
    ds->add_option("--stage", stage, "stage geometry (1, 2 or 3)")->check(CLI::Range(1, 3));
    ds->add_option("--out", out_path, "output directory")->required();
    ds->add_flag("--distinct", distinct, "draw distinct attribute combinations (32x32)");

    auto* cp = app.add_subcommand("corpus", "write a synthetic text corpus for donor pretraining");
    cp->add_option("--bytes", bytes, "minimum size in bytes");
    cp->add_option("--seed", seed, "generator seed");
    cp->add_option("--out", out_path, "output file")->required();

    auto* lm = app.add_subcommand("pretrain-lm", "train the donor byte-level LM");
    lm->add_option("--corpus", corpus, "text file")->required();
    lm->add_option("--config", config, "JSON config (model and lm sections)");
    lm->add_option("--out", out_path, "checkpoint to write")->required();

    auto* tr = app.add_subcommand("train", "run one training stage");
    tr->add_option("--stage", stage, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
    tr->add_option("--config", config, "JSON config (stage and codebook sections)");
    tr->add_option("--data", data, "dataset directory or manifest")->required();
    tr->add_option("--init", init, "donor LM (stage 1) or SemVIE checkpoint")->required();
    tr->add_option("--out", out_path, "checkpoint to write")->required();

    auto* gen = app.add_subcommand("generate", "text-to-image generation");
    gen->add_option("--ckpt", ckpt, "SemVIE checkpoint")->required();
    gen->add_option("--prompt", prompt, "caption")->required();
    gen->add_option("--width", width, "image width in pixels");
    gen->add_option("--height", height, "image height in pixels");
    decode.add(gen);
    gen->add_option("--out", out_path, "PPM file to write")->required();

    auto* sr = app.add_subcommand("superres", "super-resolve a low-resolution image with the cascade");
    sr->add_option("--ckpt", ckpt, "Stage III checkpoint")->required();
    sr->add_option("--low", low, "low-resolution PPM")->required();
    sr->add_option("--prompt", prompt, "caption")->required();
    sr->add_option("--k", k, "tokens per step (default: the model's block heads)");
    sr->add_option("--long-side", long_side, "long side of the output in pixels");
    decode.add(sr);
    sr->add_option("--out", out_path, "PPM file to write")->required();

    auto* ev = app.add_subcommand("eval", "perplexity and attribute alignment");
    ev->add_option("--ckpt", ckpt, "SemVIE checkpoint")->required();
    ev->add_option("--data", data, "dataset directory or manifest")->required();
    ev->add_option("--metrics", metrics, "ppl, align or both")->delimiter(',');
    ev->add_option("--limit", limit, "use only the first records (0 = all)");
    decode.add(ev);

    auto* gc = app.add_subcommand("gradcheck", "reverse-mode gradients against finite differences");
    gc->add_option("--config", config, "JSON config whose model section sets the geometry");
    gc->add_option("--length", length, "sequence length");
    gc->add_option("--seed", seed, "fixture seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    // eval decodes greedily unless told otherwise
    if (ev->parsed() && ev->count("--temperature") == 0) decode.temperature = 0.0f;

    try {
        if (ds->parsed()) return cmd_dataset(io, n, seed, stage, out_path, distinct);
        if (cp->parsed()) return cmd_corpus(io, bytes, seed, out_path);
        if (lm->parsed()) return cmd_pretrain(io, corpus, config, out_path);
        if (tr->parsed()) return cmd_train(io, stage, config, data, init, out_path);
        if (gen->parsed()) return cmd_generate(io, ckpt, prompt, width, height, decode, out_path);
        if (sr->parsed()) return cmd_superres(io, ckpt, low, prompt, k, long_side, decode, out_path);
        if (ev->parsed()) return cmd_eval(io, ckpt, data, metrics, decode, limit);
        if (gc->parsed()) return cmd_gradcheck(io, config, length, seed);
    } catch (const std::exception& e) {
        io.log(std::string("error: ") + e.what());
        return 1;
    }
    return 2;
}

}  // namespace mars::cli

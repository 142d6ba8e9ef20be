// pQuant command line: train / export / generate / sensitivity / footprint / bench.
// Exit codes: 0 success, 2 usage, 3 config, 4 numerical divergence, 5 I/O.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pquant/inference.hpp"
#include "pquant/sensitivity.hpp"
#include "pquant/training.hpp"

namespace fs = std::filesystem;
using namespace pquant;

namespace {

constexpr const char* kVersion = "0.1.0";

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    long long seed_override = -1;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << body;
    if (!out) throw std::runtime_error("write failed: " + path);
}

/// Every run leaves a manifest: enough to reproduce it exactly.
void write_manifest(const CommonOpts& c, const std::string& command,
                    const std::vector<std::string>& outputs, std::uint64_t seed) {
    std::ostringstream m;
    m << "command=" << command << "\n";
    m << "version=" << kVersion << "\n";
    if (!c.config_path.empty()) {
        m << "config=" << c.config_path << "\n";
        char hex[32];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(fnv1a64(read_file(c.config_path))));
        m << "config_hash=" << hex << "\n";
    }
    m << "seed=" << seed << "\n";
    for (const auto& o : outputs) m << "output=" << o << "\n";
    write_file((fs::path(c.out_dir) / "manifest.txt").string(), m.str());
}

void prepare_out_dir(const CommonOpts& c) { fs::create_directories(c.out_dir); }

int cmd_train(const CommonOpts& c, const std::string& corpus_flag, long long steps_override) {
    const ConfigFile cfg = ConfigFile::parse_file(c.config_path);
    const ModelConfig mcfg = cfg.model_config();
    TrainConfig tcfg = cfg.train_config();
    if (c.seed_override >= 0) tcfg.seed = static_cast<std::uint64_t>(c.seed_override);
    if (steps_override >= 0) {
        tcfg.total_steps = static_cast<std::size_t>(steps_override);
        if (tcfg.total_steps > 0) tcfg.validate();
    }
    std::string corpus_path = corpus_flag.empty() ? cfg.get_str("train.corpus", "") : corpus_flag;
    if (corpus_path.empty())
        throw std::invalid_argument("train: no corpus (set train.corpus or --corpus)");

    const auto corpus = train::read_corpus(corpus_path);
    prepare_out_dir(c);

    Model model(mcfg);
    model.init_params(tcfg.seed);

    const std::string metrics = (fs::path(c.out_dir) / "metrics.csv").string();
    const std::string ckpt = (fs::path(c.out_dir) / "checkpoint.pqtc").string();
    const std::string scaling = (fs::path(c.out_dir) / "feature_scaling.csv").string();

    train::Trainer trainer(model, tcfg, corpus);
    const train::TrainResult result = trainer.run(metrics);
    save_checkpoint(model, tcfg, ckpt);
    write_file(scaling, train::feature_scaling_table(model));

    write_manifest(c, "train", {metrics, ckpt, scaling}, tcfg.seed);
    std::cout << "trained " << tcfg.total_steps << " steps; final loss " << result.final_loss
              << "\n";
    return 0;
}

int cmd_export(const CommonOpts& c, const std::string& ckpt_path) {
    prepare_out_dir(c);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::string out = (fs::path(c.out_dir) / "model.pqtm").string();
    infer::export_packed(ckpt, out);
    write_manifest(c, "export", {out}, ckpt.train_cfg.seed);
    std::cout << "packed model written to " << out << "\n";
    return 0;
}

int cmd_generate(const CommonOpts& c, const std::string& model_path, const std::string& prompt,
                 std::size_t n_tokens) {
    Model pm = infer::load_packed(model_path);
    std::vector<std::uint8_t> ptoks(prompt.begin(), prompt.end());
    const auto continuation = infer::generate(pm, ptoks, n_tokens);
    std::string text(continuation.begin(), continuation.end());
    std::cout << prompt << text << "\n";
    if (!c.out_dir.empty()) {
        prepare_out_dir(c);
        const std::string out = (fs::path(c.out_dir) / "generation.txt").string();
        write_file(out, prompt + text);
        write_manifest(c, "generate", {out}, 0);
    }
    return 0;
}

int cmd_sensitivity(const CommonOpts& c, const std::string& ckpt_path, const std::string& layer,
                    std::size_t pool, const std::string& corpus_path, std::size_t samples,
                    double damping) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    Model model = model_from_checkpoint(ckpt);
    const auto corpus = train::read_corpus(corpus_path);

    std::size_t layer_idx = 0;
    if (layer == "ffn.last") {
        layer_idx = model.cfg.n_layers - 1;
    } else if (layer.rfind("ffn.", 0) == 0) {
        layer_idx = static_cast<std::size_t>(std::stoul(layer.substr(4)));
    } else {
        throw std::invalid_argument("sensitivity: layer must be ffn.last or ffn.<index>");
    }
    if (layer_idx >= model.cfg.n_layers)
        throw std::invalid_argument("sensitivity: layer index out of range");

    const std::uint64_t seed =
        c.seed_override >= 0 ? static_cast<std::uint64_t>(c.seed_override) : ckpt.train_cfg.seed;
    auto cal = sens::collect_down_calibration(model, corpus, layer_idx,
                                              ckpt.train_cfg.seq_len, samples, seed);

    prepare_out_dir(c);
    std::vector<std::string> outputs;
    auto emit = [&](const char* tag, const Matrix& w, const sens::CalibrationSet& cs) {
        const sens::HessianInverse hinv = sens::build_hessian_inverse(cs, damping);
        const sens::SensitivityMap map = sens::sensitivity_closed_form(w, hinv);
        const Matrix grid = sens::heatmap_grid(map, pool);
        const std::string csv = (fs::path(c.out_dir) / (std::string(tag) + ".csv")).string();
        const std::string pgm = (fs::path(c.out_dir) / (std::string(tag) + ".pgm")).string();
        sens::write_heatmap_csv(grid, csv);
        sens::write_heatmap_pgm(grid, pgm);
        outputs.push_back(csv);
        outputs.push_back(pgm);
        return sens::democratization_stats(map);
    };

    const auto stats8 = emit("sens_8bit_down", cal.hp_weights, cal.hp_cal);
    const auto stats1 = emit("sens_1bit_down", cal.bit_weights, cal.bit_cal);

    std::ostringstream st;
    st.precision(10);
    st << "branch,log_variance,interquartile_ratio,top1pct_share,entries\n";
    st << "int8." << cal.branch << ',' << stats8.log_variance << ',' << stats8.interquartile_ratio
       << ',' << stats8.top_share << ',' << stats8.entries << "\n";
    st << "onebit," << stats1.log_variance << ',' << stats1.interquartile_ratio << ','
       << stats1.top_share << ',' << stats1.entries << "\n";
    const std::string stats_path = (fs::path(c.out_dir) / "democratization.csv").string();
    write_file(stats_path, st.str());
    outputs.push_back(stats_path);

    write_manifest(c, "sensitivity", outputs, seed);
    std::cout << st.str();
    return 0;
}

int cmd_footprint(const CommonOpts& c) {
    const ConfigFile cfg = ConfigFile::parse_file(c.config_path);
    const ModelConfig mcfg = cfg.model_config();

    infer::PrecisionPlan plan;
    const std::string kind = cfg.get_str("plan.precision", "pquant");
    if (kind == "fp16") {
        plan = infer::PrecisionPlan::fp16();
    } else if (kind == "pquant") {
        plan.embedding_bits =
            static_cast<unsigned>(cfg.get_count("plan.embedding_bits", plan.embedding_bits));
        plan.norm_bits = static_cast<unsigned>(cfg.get_count("plan.norm_bits", plan.norm_bits));
        plan.router_bits =
            static_cast<unsigned>(cfg.get_count("plan.router_bits", plan.router_bits));
        plan.scale_bits = static_cast<unsigned>(cfg.get_count("plan.scale_bits", plan.scale_bits));
    } else {
        throw std::invalid_argument("plan.precision must be fp16 or pquant");
    }

    const infer::FootprintReport rep = infer::memory_footprint(mcfg, plan);
    prepare_out_dir(c);
    const std::string csv = (fs::path(c.out_dir) / "footprint.csv").string();
    write_file(csv, infer::footprint_csv(rep));
    write_manifest(c, "footprint", {csv}, 0);
    std::cout << infer::footprint_summary(rep);
    return 0;
}

int cmd_bench(const CommonOpts& c, const std::string& sizes_flag, std::size_t reps) {
    std::vector<std::pair<std::size_t, std::size_t>> sizes;
    std::istringstream ss(sizes_flag);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto x = tok.find('x');
        if (x == std::string::npos)
            throw std::invalid_argument("bench: sizes must look like 64x256,128x512");
        sizes.emplace_back(std::stoull(tok.substr(0, x)), std::stoull(tok.substr(x + 1)));
    }
    if (sizes.empty()) throw std::invalid_argument("bench: no sizes given");

    const auto rows = infer::bench_kernels(sizes, reps);
    prepare_out_dir(c);
    const std::string csv = (fs::path(c.out_dir) / "bench.csv").string();
    write_file(csv, infer::bench_csv(rows));
    write_manifest(c, "bench", {csv}, 0);
    std::cout << infer::bench_csv(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef _OPENMP
    if (const char* threads = std::getenv("PQUANT_THREADS")) {
        const int n = std::atoi(threads);
        if (n > 0) omp_set_num_threads(n);
    }
#endif

    CLI::App app{"pQuant: extremely low-bit transformer toolkit"};
    app.require_subcommand(1);

    CommonOpts common;
    std::string corpus_flag, ckpt_path, model_path, prompt, layer = "ffn.last";
    std::string sizes_flag = "64x256,128x512";
    long long steps_override = -1;
    std::size_t n_tokens = 64, pool = 16, samples = 2048, reps = 25;
    double damping = 0.01;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", common.config_path, "config file (key = value)");
        if (needs_config) opt->required();
        sub->add_option("--out", common.out_dir, "output directory");
        sub->add_option("--seed", common.seed_override, "seed override");
    };

    auto* train_cmd = app.add_subcommand("train", "QAT from scratch on a byte corpus");
    add_common(train_cmd, true);
    train_cmd->add_option("--corpus", corpus_flag, "training corpus (overrides train.corpus)");
    train_cmd->add_option("--steps", steps_override, "override train.total_steps");

    auto* export_cmd = app.add_subcommand("export", "checkpoint -> packed inference model");
    add_common(export_cmd, false);
    export_cmd->add_option("--checkpoint", ckpt_path, "checkpoint (.pqtc)")->required();

    auto* gen_cmd = app.add_subcommand("generate", "greedy decoding from a packed model");
    add_common(gen_cmd, false);
    gen_cmd->add_option("--model", model_path, "packed model (.pqtm)")->required();
    gen_cmd->add_option("--prompt", prompt, "prompt text")->required();
    gen_cmd->add_option("--tokens", n_tokens, "tokens to generate");

    auto* sens_cmd = app.add_subcommand("sensitivity", "per-weight sensitivity heatmaps");
    add_common(sens_cmd, false);
    sens_cmd->add_option("--checkpoint", ckpt_path, "checkpoint (.pqtc)")->required();
    sens_cmd->add_option("--layer", layer, "ffn.last or ffn.<index>");
    sens_cmd->add_option("--pool", pool, "max-pool block size");
    sens_cmd->add_option("--corpus", corpus_flag, "calibration corpus")->required();
    sens_cmd->add_option("--samples", samples, "calibration tokens");
    sens_cmd->add_option("--damping", damping, "relative Hessian damping");

    auto* foot_cmd = app.add_subcommand("footprint", "analytic memory accounting");
    add_common(foot_cmd, true);

    auto* bench_cmd = app.add_subcommand("bench", "kernel microbenchmarks");
    add_common(bench_cmd, false);
    bench_cmd->add_option("--sizes", sizes_flag, "comma list of RxC GEMV shapes");
    bench_cmd->add_option("--reps", reps, "repetitions per kernel");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(common, corpus_flag, steps_override);
        if (export_cmd->parsed()) return cmd_export(common, ckpt_path);
        if (gen_cmd->parsed()) return cmd_generate(common, model_path, prompt, n_tokens);
        if (sens_cmd->parsed())
            return cmd_sensitivity(common, ckpt_path, layer, pool, corpus_flag, samples, damping);
        if (foot_cmd->parsed()) return cmd_footprint(common);
        if (bench_cmd->parsed()) return cmd_bench(common, sizes_flag, reps);
    } catch (const train::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    }
    return 2;
}

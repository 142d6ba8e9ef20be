#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pquant/inference.hpp"
#include "pquant/training.hpp"
#include "testutil.hpp"

using namespace pquant;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const char* name) {
    return (fs::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Train a toy decoupled model for a handful of steps so quantities are not
/// at their initialization values.
Model trained_toy(std::size_t n_branches, std::uint64_t seed, TrainConfig& tcfg_out) {
    ModelConfig mc;
    mc.d_model = 32;
    mc.d_ffn_nominal = 96;
    mc.r = 32;
    mc.r_alignment = 32;
    mc.n_branches = n_branches;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.vocab_size = 256;
    mc.max_seq_len = 32;
    Model model(mc);
    model.init_params(seed);

    TrainConfig t;
    t.total_steps = 30;
    t.warmup_steps = 6;
    t.peak_lr = 3e-3;
    t.apply_lr_defaults();
    t.seq_len = 16;
    t.batch_tokens = 64;
    t.seed = seed;
    tcfg_out = t;

    auto corpus = testutil::synthetic_corpus(8192, seed);
    train::Trainer trainer(model, t, corpus);
    for (std::size_t s = 0; s < t.total_steps; ++s) trainer.step();
    return model;
}

}  // namespace

TEST_CASE("effective bits from published splits") {
    CHECK(infer::effective_bits_from_split(0.96, 0.04) == 1.28);
    CHECK(infer::effective_bits_from_split(0.95, 0.05) == 1.35);
}

TEST_CASE("footprint: fp16 plan lands on the published 1.3B total") {
    const ConfigFile cfg =
        ConfigFile::parse_file(std::string(PQUANT_SOURCE_DIR) + "/configs/table4_fp16_1p3b.cfg");
    const ModelConfig mc = cfg.model_config();
    const auto rep = infer::memory_footprint(mc, infer::PrecisionPlan::fp16());
    CHECK(rep.total_params > 1.25e9);
    CHECK(rep.total_params < 1.45e9);
    const double gb = static_cast<double>(rep.total_bytes) / 1e9;
    CHECK(std::fabs(gb - 2.64) / 2.64 < 0.10);
    CHECK(rep.effective_bits == 16.0);
}

TEST_CASE("footprint: pQuant N=8 plan lands on the published total") {
    const ConfigFile cfg = ConfigFile::parse_file(std::string(PQUANT_SOURCE_DIR) +
                                                  "/configs/table4_pquant_n8_1p3b.cfg");
    const ModelConfig mc = cfg.model_config();
    infer::PrecisionPlan plan;
    plan.embedding_bits = static_cast<unsigned>(cfg.get_count("plan.embedding_bits", 16));
    plan.norm_bits = static_cast<unsigned>(cfg.get_count("plan.norm_bits", 16));
    plan.router_bits = static_cast<unsigned>(cfg.get_count("plan.router_bits", 16));

    const auto rep = infer::memory_footprint(mc, plan);
    CHECK(rep.total_params > 1.25e9);
    CHECK(rep.total_params < 1.4e9);
    const double gb = static_cast<double>(rep.total_bytes) / 1e9;
    CHECK(std::fabs(gb - 0.98) / 0.98 < 0.10);
    CHECK(rep.effective_bits > 1.0);
    CHECK(rep.effective_bits < 8.0);
    CHECK(rep.total_bytes == rep.onebit_bytes + rep.int8_bytes + rep.embedding_bytes +
                                 rep.norm_bytes + rep.router_bytes + rep.scale_bytes);
    CHECK(rep.transfer_bytes < rep.total_bytes);
}

TEST_CASE("footprint: per-decode transfer is independent of the branch count") {
    const ConfigFile cfg = ConfigFile::parse_file(std::string(PQUANT_SOURCE_DIR) +
                                                  "/configs/table4_pquant_n8_1p3b.cfg");
    ModelConfig mc = cfg.model_config();
    infer::PrecisionPlan plan;
    plan.embedding_bits = plan.norm_bits = plan.router_bits = 32;

    std::uint64_t reference = 0;
    for (std::size_t n : {1u, 2u, 4u, 8u}) {
        mc.n_branches = n;
        const auto rep = infer::memory_footprint(mc, plan);
        if (reference == 0)
            reference = rep.transfer_bytes;
        else
            CHECK(rep.transfer_bytes == reference);
    }
}

TEST_CASE("fuse_scales example: lambda 2 with beta 0.2 fuses to 0.4") {
    layers::BitLinear l("f", 2, 4);
    l.weight.value = Matrix(2, 4, {2, -2, 2, -2, -2, 2, -2, 2});  // lambda = 2, mu = 0
    l.freeze(0.2);
    CHECK(l.fused_scale == doctest::Approx(0.4).epsilon(1e-15));

    layers::BitLinear unit("u", 1, 2);
    unit.weight.value = Matrix(1, 2, {1, -1});  // lambda = 1
    unit.freeze(1.0);
    CHECK(unit.fused_scale == 1.0);
}

TEST_CASE("export is deterministic byte for byte") {
    TrainConfig t;
    Model model = trained_toy(2, 71, t);
    const std::string ckpt_path = tmp_path("pq_export_ckpt.pqtc");
    save_checkpoint(model, t, ckpt_path);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);

    const std::string p1 = tmp_path("pq_export_1.pqtm");
    const std::string p2 = tmp_path("pq_export_2.pqtm");
    infer::export_packed(ckpt, p1);
    infer::export_packed(ckpt, p2);
    CHECK(slurp(p1) == slurp(p2));
    std::remove(ckpt_path.c_str());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("packed model: no latent weights, logits identical to training mode") {
    TrainConfig t;
    Model model = trained_toy(2, 72, t);
    const std::string ckpt_path = tmp_path("pq_equiv_ckpt.pqtc");
    save_checkpoint(model, t, ckpt_path);
    const std::string pm_path = tmp_path("pq_equiv.pqtm");
    infer::export_packed(load_checkpoint(ckpt_path), pm_path);

    Model packed = infer::load_packed(pm_path);
    CHECK(packed.frozen());
    for (auto& b : packed.blocks) {
        CHECK(b.attn.wq.weight.value.size() == 0);
        CHECK(b.ffn.bit_up.weight.value.size() == 0);
        for (auto& hb : b.ffn.hp) CHECK(hb.up.weight.value.size() == 0);
    }

    auto corpus = testutil::synthetic_corpus(512, 72);
    std::vector<std::uint8_t> window(corpus.begin(), corpus.begin() + 16);
    const Matrix lt = model.forward(window, 16);
    const Matrix lp = packed.forward(window, 16);
    CHECK(testutil::max_rel_diff(lt, lp) < 1e-5);
    // Same integer kernels, same scale order: the agreement is exact.
    CHECK(testutil::max_rel_diff(lt, lp) == 0.0);

    std::remove(ckpt_path.c_str());
    std::remove(pm_path.c_str());
}

TEST_CASE("generate: empty continuation, determinism, packed/training identity") {
    TrainConfig t;
    Model model = trained_toy(1, 73, t);
    const std::string ckpt_path = tmp_path("pq_gen_ckpt.pqtc");
    save_checkpoint(model, t, ckpt_path);
    const std::string pm_path = tmp_path("pq_gen.pqtm");
    infer::export_packed(load_checkpoint(ckpt_path), pm_path);
    Model packed = infer::load_packed(pm_path);

    std::vector<std::uint8_t> prompt{'t', 'h', 'e', ' '};
    CHECK(infer::generate(packed, prompt, 0).empty());

    const auto a = infer::generate(packed, prompt, 24);
    const auto b = infer::generate(packed, prompt, 24);
    CHECK(a == b);

    const auto train_mode = infer::generate(model, prompt, 24);
    CHECK(a == train_mode);

    CHECK_THROWS_AS(infer::generate(packed, {}, 4), std::invalid_argument);

    std::remove(ckpt_path.c_str());
    std::remove(pm_path.c_str());
}

TEST_CASE("bench: one row per kernel and size, correctness-gated") {
    const auto rows = infer::bench_kernels({{8, 32}, {16, 64}}, 3);
    CHECK(rows.size() == 2 * 4);
    for (const auto& r : rows) {
        CHECK(r.median_ns >= 0.0);
        CHECK(r.reps == 3);
    }
    const std::string csv = infer::bench_csv(rows);
    CHECK(csv.rfind("kernel,rows,cols,median_ns,reps", 0) == 0);
}

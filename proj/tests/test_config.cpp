#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pquant/config.hpp"

using namespace pquant;

TEST_CASE("config parsing: comments, whitespace, key = value") {
    const char* text =
        "# a comment\n"
        "model.d_model = 48   # trailing comment\n"
        "\n"
        "model.n_heads=4\n"
        "train.peak_lr = 2.5e-3\n";
    ConfigFile cfg = ConfigFile::parse_text(text);
    CHECK(cfg.get_count("model.d_model", 0) == 48);
    CHECK(cfg.get_count("model.n_heads", 0) == 4);
    CHECK(cfg.get_real("train.peak_lr", 0) == 2.5e-3);
    CHECK(cfg.get_count("model.n_layers", 7) == 7);  // fallback
}

TEST_CASE("config parsing: malformed lines and unknown keys fail loudly") {
    CHECK_THROWS_AS(ConfigFile::parse_text("novalue\n"), std::invalid_argument);
    CHECK_THROWS_AS(ConfigFile::parse_text("= 3\n"), std::invalid_argument);

    ConfigFile cfg = ConfigFile::parse_text("model.dmodel = 8\n");  // typo
    CHECK_THROWS_AS(cfg.model_config(), std::invalid_argument);

    ConfigFile bad = ConfigFile::parse_text("model.d_model = x\n");
    CHECK_THROWS_AS(bad.model_config(), std::invalid_argument);
}

TEST_CASE("model config invariants") {
    ConfigFile heads = ConfigFile::parse_text("model.d_model = 60\nmodel.n_heads = 7\n");
    CHECK_THROWS_AS(heads.model_config(), std::invalid_argument);

    ConfigFile align = ConfigFile::parse_text(
        "model.d_ffn_nominal = 512\nmodel.r = 100\nmodel.r_alignment = 128\n");
    CHECK_THROWS_AS(align.model_config(), std::invalid_argument);

    ConfigFile rtoobig = ConfigFile::parse_text(
        "model.d_ffn_nominal = 128\nmodel.r = 128\nmodel.r_alignment = 128\n");
    CHECK_THROWS_AS(rtoobig.model_config(), std::invalid_argument);

    // The pure 1-bit baseline needs no r at all.
    ConfigFile pure = ConfigFile::parse_text("model.n_branches = 0\n");
    CHECK_NOTHROW(pure.model_config());
}

TEST_CASE("train config defaults follow the published recipe") {
    ConfigFile cfg = ConfigFile::parse_text("train.peak_lr = 0.002\n");
    TrainConfig t = cfg.train_config();
    CHECK(t.warmup_steps == 500);
    CHECK(t.wd_phase1 == 0.1);
    CHECK(t.wd_phase2 == 0.0);
    CHECK(t.adam_beta1 == 0.9);
    CHECK(t.adam_beta2 == 0.95);
    CHECK(t.phase1_end_lr == 0.5 * 0.002);
    CHECK(t.phase2_start_lr == doctest::Approx(0.1 * 0.002));
    CHECK(t.final_lr == doctest::Approx(0.01 * 0.002));
}

TEST_CASE("train config invariants") {
    ConfigFile warm = ConfigFile::parse_text(
        "train.total_steps = 100\ntrain.warmup_steps = 50\n");
    CHECK_THROWS_AS(warm.train_config(), std::invalid_argument);

    ConfigFile order = ConfigFile::parse_text(
        "train.peak_lr = 1e-3\ntrain.phase2_start_lr = 2e-3\ntrain.final_lr = 1e-5\n");
    CHECK_THROWS_AS(order.train_config(), std::invalid_argument);
}

TEST_CASE("fnv1a64 is stable and content-sensitive") {
    const std::uint64_t a = fnv1a64("model.d_model = 64\n");
    CHECK(a == fnv1a64("model.d_model = 64\n"));
    CHECK(a != fnv1a64("model.d_model = 65\n"));
    CHECK(fnv1a64("") == 1469598103934665603ull);
}

TEST_CASE("model config default feature scaling matches the converged values") {
    ConfigFile cfg = ConfigFile::parse_text("");
    ModelConfig m = cfg.model_config();
    CHECK(m.alpha_init == 2.0);
    CHECK(m.beta_init == 0.2);
}

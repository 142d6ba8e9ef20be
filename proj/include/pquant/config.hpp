#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace pquant {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_ffn_nominal = 256;  // total FFN hidden width; the 8-bit carve-out comes off it
    std::size_t r = 128;              // hidden width of each 8-bit branch
    std::size_t n_branches = 1;       // N; 0 selects the pure 1-bit baseline FFN
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 256;     // byte-level
    std::size_t max_seq_len = 128;
    std::size_t r_alignment = 128;
    double alpha_init = 2.0;
    double beta_init = 0.2;

    void validate() const;
};

struct TrainConfig {
    std::size_t total_steps = 2000;
    std::size_t warmup_steps = 500;
    double peak_lr = 1e-3;
    double phase1_end_lr = 0.0;    // 0 -> default 0.5 * peak
    double phase2_start_lr = 0.0;  // 0 -> default 0.1 * peak
    double final_lr = 0.0;         // 0 -> default 0.01 * peak
    double wd_phase1 = 0.1;
    double wd_phase2 = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global-norm clip; <= 0 disables
    std::size_t batch_tokens = 16384;
    std::size_t seq_len = 64;
    std::uint64_t seed = 1;

    void apply_lr_defaults();
    void validate() const;

    std::size_t midpoint() const { return total_steps / 2; }
};

/// Flat key = value config file ('#' comments, blank lines ignored).
/// Unknown keys are rejected so typos fail loudly.
struct ConfigFile {
    std::map<std::string, std::string> entries;

    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_text(const std::string& text);

    bool has(const std::string& key) const { return entries.count(key) != 0; }
    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::size_t get_count(const std::string& key, std::size_t fallback) const;
    double get_real(const std::string& key, double fallback) const;

    ModelConfig model_config() const;
    TrainConfig train_config() const;
};

/// FNV-1a over the raw config file bytes; recorded in run manifests.
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace pquant

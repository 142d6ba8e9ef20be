#include "pquant/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace pquant {

void ModelConfig::validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0)
        throw std::invalid_argument("model config: counts must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("model config: n_heads must divide d_model");
    if (n_branches > 0) {
        if (r == 0 || r >= d_ffn_nominal)
            throw std::invalid_argument("model config: need 0 < r < d_ffn_nominal");
        if (r_alignment == 0 || r % r_alignment != 0)
            throw std::invalid_argument("model config: r must be a multiple of r_alignment");
    }
}

void TrainConfig::apply_lr_defaults() {
    if (phase1_end_lr <= 0.0) phase1_end_lr = 0.5 * peak_lr;
    if (phase2_start_lr <= 0.0) phase2_start_lr = 0.1 * peak_lr;
    if (final_lr <= 0.0) final_lr = 0.01 * peak_lr;
}

void TrainConfig::validate() const {
    if (total_steps > 0) {
        if (warmup_steps == 0 || warmup_steps >= total_steps / 2)
            throw std::invalid_argument("train config: need 0 < warmup_steps < total_steps/2");
    }
    const bool frozen = peak_lr == 0.0 && phase2_start_lr == 0.0 && final_lr == 0.0;
    if (!frozen &&
        !(peak_lr > phase2_start_lr && phase2_start_lr > final_lr && final_lr >= 0.0))
        throw std::invalid_argument("train config: need peak_lr > phase2_start_lr > final_lr >= 0");
    if (seq_len == 0 || batch_tokens < seq_len)
        throw std::invalid_argument("train config: batch_tokens must cover at least one sequence");
}

ConfigFile ConfigFile::parse_text(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const char* ws = " \t\r";
        auto b = s.find_first_not_of(ws);
        if (b == std::string::npos) return std::string();
        auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) +
                                                     ": empty key");
        cfg.entries[key] = value;
    }
    return cfg;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

std::string ConfigFile::get_str(const std::string& key, const std::string& fallback) const {
    auto it = entries.find(key);
    return it == entries.end() ? fallback : it->second;
}

std::size_t ConfigFile::get_count(const std::string& key, std::size_t fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) return fallback;
    try {
        long long v = std::stoll(it->second);
        if (v < 0) throw std::invalid_argument("negative");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not a count: " + it->second);
    }
}

double ConfigFile::get_real(const std::string& key, double fallback) const {
    auto it = entries.find(key);
    if (it == entries.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not a number: " + it->second);
    }
}

namespace {

const std::set<std::string> kKnownKeys = {
    "model.d_model", "model.d_ffn_nominal", "model.r", "model.n_branches", "model.n_layers",
    "model.n_heads", "model.vocab_size", "model.max_seq_len", "model.r_alignment",
    "model.alpha_init", "model.beta_init",
    "train.total_steps", "train.warmup_steps", "train.peak_lr", "train.phase1_end_lr",
    "train.phase2_start_lr", "train.final_lr", "train.wd_phase1", "train.wd_phase2",
    "train.adam_beta1", "train.adam_beta2", "train.adam_eps", "train.grad_clip",
    "train.batch_tokens", "train.seq_len", "train.seed", "train.corpus",
    "plan.precision", "plan.embedding_bits", "plan.norm_bits", "plan.router_bits",
    "plan.scale_bits",
};

}  // namespace

ModelConfig ConfigFile::model_config() const {
    for (const auto& [k, v] : entries)
        if (!kKnownKeys.count(k))
            throw std::invalid_argument("unknown config key: " + k);
    ModelConfig m;
    m.d_model = get_count("model.d_model", m.d_model);
    m.d_ffn_nominal = get_count("model.d_ffn_nominal", m.d_ffn_nominal);
    m.r = get_count("model.r", m.r);
    m.n_branches = get_count("model.n_branches", m.n_branches);
    m.n_layers = get_count("model.n_layers", m.n_layers);
    m.n_heads = get_count("model.n_heads", m.n_heads);
    m.vocab_size = get_count("model.vocab_size", m.vocab_size);
    m.max_seq_len = get_count("model.max_seq_len", m.max_seq_len);
    m.r_alignment = get_count("model.r_alignment", m.r_alignment);
    m.alpha_init = get_real("model.alpha_init", m.alpha_init);
    m.beta_init = get_real("model.beta_init", m.beta_init);
    m.validate();
    return m;
}

TrainConfig ConfigFile::train_config() const {
    TrainConfig t;
    t.total_steps = get_count("train.total_steps", t.total_steps);
    t.warmup_steps = get_count("train.warmup_steps", t.warmup_steps);
    t.peak_lr = get_real("train.peak_lr", t.peak_lr);
    t.phase1_end_lr = get_real("train.phase1_end_lr", 0.0);
    t.phase2_start_lr = get_real("train.phase2_start_lr", 0.0);
    t.final_lr = get_real("train.final_lr", 0.0);
    t.wd_phase1 = get_real("train.wd_phase1", t.wd_phase1);
    t.wd_phase2 = get_real("train.wd_phase2", t.wd_phase2);
    t.adam_beta1 = get_real("train.adam_beta1", t.adam_beta1);
    t.adam_beta2 = get_real("train.adam_beta2", t.adam_beta2);
    t.adam_eps = get_real("train.adam_eps", t.adam_eps);
    t.grad_clip = get_real("train.grad_clip", t.grad_clip);
    t.batch_tokens = get_count("train.batch_tokens", t.batch_tokens);
    t.seq_len = get_count("train.seq_len", t.seq_len);
    t.seed = get_count("train.seed", 1);
    t.apply_lr_defaults();
    t.validate();
    return t;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace pquant

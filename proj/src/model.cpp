#include "pquant/model.hpp"

#include <cmath>

#include "pquant/serialize.hpp"

namespace pquant {

Model::Model(const ModelConfig& c)
    : cfg(c),
      tok_emb("tok_emb", c.vocab_size, c.d_model),
      pos_emb("pos_emb", c.max_seq_len, c.d_model),
      final_norm("final_norm.gain", c.d_model),
      lm_head("lm_head", c.vocab_size, c.d_model) {
    cfg.validate();
    blocks.reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        blocks.emplace_back("blocks." + std::to_string(l), cfg.d_model, cfg.n_heads,
                            cfg.d_ffn_nominal, cfg.r, cfg.n_branches);
}

void Model::init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    tok_emb.value = randn(cfg.vocab_size, cfg.d_model, base, rng);
    pos_emb.value = randn(cfg.max_seq_len, cfg.d_model, base, rng);
    for (auto& b : blocks) {
        b.attn.wq.weight.value = randn(cfg.d_model, cfg.d_model, base, rng);
        b.attn.wk.weight.value = randn(cfg.d_model, cfg.d_model, base, rng);
        b.attn.wv.weight.value = randn(cfg.d_model, cfg.d_model, base, rng);
        b.attn.wo.weight.value = randn(cfg.d_model, cfg.d_model, resid, rng);
        auto& f = b.ffn;
        f.bit_up.weight.value = randn(f.bit_up.out_features, cfg.d_model, base, rng);
        f.bit_down.weight.value = randn(cfg.d_model, f.bit_down.in_features, resid, rng);
        if (cfg.n_branches > 0) {
            f.router.value = randn(cfg.n_branches, cfg.d_model, base, rng);
            f.alpha.value.data[0] = cfg.alpha_init;
            f.beta.value.data[0] = cfg.beta_init;
            for (auto& hb : f.hp) {
                hb.up.weight.value = randn(cfg.r, cfg.d_model, base, rng);
                hb.down.weight.value = randn(cfg.d_model, cfg.r, resid, rng);
            }
        }
    }
    lm_head.value = randn(cfg.vocab_size, cfg.d_model, base, rng);
}

void Model::visit_params(const layers::ParamVisitor& v) {
    if (frozen_) return;
    v(tok_emb);
    v(pos_emb);
    for (auto& b : blocks) b.visit(v);
    final_norm.visit(v);
    v(lm_head);
}

std::size_t Model::param_count() {
    std::size_t n = 0;
    visit_params([&](layers::Param& p) { n += p.value.size(); });
    return n;
}

void Model::zero_grads() {
    visit_params([](layers::Param& p) { p.zero_grad(); });
}

Matrix Model::forward(const std::vector<std::uint8_t>& tokens, std::size_t seq_len,
                      long tap_layer, layers::FfnTap* tap) {
    if (seq_len == 0 || tokens.size() % seq_len != 0)
        throw std::invalid_argument("model forward: tokens must fill whole sequences");
    if (seq_len > cfg.max_seq_len)
        throw std::invalid_argument("model forward: sequence longer than max_seq_len");
    const std::size_t n = tokens.size();

    Matrix x(n, cfg.d_model);
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t tok = tokens[t];
        if (tok >= cfg.vocab_size)
            throw std::invalid_argument("model forward: token outside vocabulary");
        const double* er = tok_emb.value.row(tok);
        const double* pr = pos_emb.value.row(t % seq_len);
        double* xr = x.row(t);
        for (std::size_t j = 0; j < cfg.d_model; ++j) xr[j] = er[j] + pr[j];
    }
    tokens_cache_ = tokens;
    seq_len_cache_ = seq_len;
    x_cache_ = x;

    for (std::size_t l = 0; l < blocks.size(); ++l)
        x = blocks[l].forward(x, seq_len,
                              static_cast<long>(l) == tap_layer ? tap : nullptr);

    final_in_cache_ = x;
    Matrix xn = final_norm.forward(x);
    return matmul_nt(xn, lm_head.value);
}

double Model::loss_only(const Matrix& logits, const std::vector<std::uint8_t>& targets) const {
    double total = 0.0;
    std::vector<double> p(cfg.vocab_size);
    for (std::size_t t = 0; t < logits.rows; ++t) {
        const double* lr = logits.row(t);
        double m = lr[0];
        for (std::size_t j = 1; j < cfg.vocab_size; ++j) m = std::max(m, lr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) sum += std::exp(lr[j] - m);
        total += std::log(sum) + m - lr[targets[t]];
    }
    return total / static_cast<double>(logits.rows);
}

double Model::loss_and_backward(const Matrix& logits, const std::vector<std::uint8_t>& targets) {
    if (targets.size() != logits.rows)
        throw std::invalid_argument("loss: one target per token required");
    const std::size_t n = logits.rows;
    const double invn = 1.0 / static_cast<double>(n);

    Matrix dlogits(n, cfg.vocab_size);
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const double* lr = logits.row(t);
        double* dr = dlogits.row(t);
        double m = lr[0];
        for (std::size_t j = 1; j < cfg.vocab_size; ++j) m = std::max(m, lr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
            dr[j] = std::exp(lr[j] - m);
            sum += dr[j];
        }
        const double inv = 1.0 / sum;
        total += std::log(sum) + m - lr[targets[t]];
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) dr[j] *= inv * invn;
        dr[targets[t]] -= invn;
    }
    backward(dlogits);
    return total * invn;
}

void Model::backward(const Matrix& dlogits) {
    // Head and final norm.
    Matrix xn = final_norm.forward(final_in_cache_);  // recompute, cheap relative to storage
    {
        const Matrix hg = matmul_tn(dlogits, xn);
        for (std::size_t k = 0; k < hg.size(); ++k) lm_head.grad.data[k] += hg.data[k];
    }
    Matrix dxn = matmul_nn(dlogits, lm_head.value);
    Matrix dx = final_norm.backward(dxn);

    for (std::size_t l = blocks.size(); l-- > 0;) dx = blocks[l].backward(dx);

    // Embedding scatter.
    for (std::size_t t = 0; t < tokens_cache_.size(); ++t) {
        const double* dr = dx.row(t);
        double* eg = tok_emb.grad.row(tokens_cache_[t]);
        double* pg = pos_emb.grad.row(t % seq_len_cache_);
        for (std::size_t j = 0; j < cfg.d_model; ++j) {
            eg[j] += dr[j];
            pg[j] += dr[j];
        }
    }
}

void Model::freeze() {
    if (frozen_) return;
    for (auto& b : blocks) b.freeze();
    frozen_ = true;
}

std::vector<std::size_t> Model::branch_counts() const {
    if (cfg.n_branches == 0) return {};
    std::vector<std::size_t> counts(cfg.n_branches, 0);
    for (const auto& b : blocks) {
        const auto& c = b.ffn.last_branch_counts();
        for (std::size_t k = 0; k < c.size(); ++k) counts[k] += c[k];
    }
    return counts;
}

// -- checkpoint io ---------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_model_cfg(io::Writer& w, const ModelConfig& m) {
    w.u64(m.d_model);
    w.u64(m.d_ffn_nominal);
    w.u64(m.r);
    w.u64(m.n_branches);
    w.u64(m.n_layers);
    w.u64(m.n_heads);
    w.u64(m.vocab_size);
    w.u64(m.max_seq_len);
    w.u64(m.r_alignment);
    w.f64(m.alpha_init);
    w.f64(m.beta_init);
}

ModelConfig read_model_cfg(io::Reader& r) {
    ModelConfig m;
    m.d_model = r.u64();
    m.d_ffn_nominal = r.u64();
    m.r = r.u64();
    m.n_branches = r.u64();
    m.n_layers = r.u64();
    m.n_heads = r.u64();
    m.vocab_size = r.u64();
    m.max_seq_len = r.u64();
    m.r_alignment = r.u64();
    m.alpha_init = r.f64();
    m.beta_init = r.f64();
    return m;
}

void write_train_cfg(io::Writer& w, const TrainConfig& t) {
    w.u64(t.total_steps);
    w.u64(t.warmup_steps);
    w.f64(t.peak_lr);
    w.f64(t.phase1_end_lr);
    w.f64(t.phase2_start_lr);
    w.f64(t.final_lr);
    w.f64(t.wd_phase1);
    w.f64(t.wd_phase2);
    w.f64(t.adam_beta1);
    w.f64(t.adam_beta2);
    w.f64(t.adam_eps);
    w.f64(t.grad_clip);
    w.u64(t.batch_tokens);
    w.u64(t.seq_len);
    w.u64(t.seed);
}

TrainConfig read_train_cfg(io::Reader& r) {
    TrainConfig t;
    t.total_steps = r.u64();
    t.warmup_steps = r.u64();
    t.peak_lr = r.f64();
    t.phase1_end_lr = r.f64();
    t.phase2_start_lr = r.f64();
    t.final_lr = r.f64();
    t.wd_phase1 = r.f64();
    t.wd_phase2 = r.f64();
    t.adam_beta1 = r.f64();
    t.adam_beta2 = r.f64();
    t.adam_eps = r.f64();
    t.grad_clip = r.f64();
    t.batch_tokens = r.u64();
    t.seq_len = r.u64();
    t.seed = r.u64();
    return t;
}

}  // namespace

void save_checkpoint(Model& model, const TrainConfig& tcfg, const std::string& path) {
    io::Writer w(path);
    w.bytes("PQTC", 4);
    w.u32(kCheckpointVersion);
    write_model_cfg(w, model.cfg);
    write_train_cfg(w, tcfg);

    std::uint64_t count = 0;
    model.visit_params([&](layers::Param&) { count++; });
    w.u64(count);
    model.visit_params([&](layers::Param& p) {
        w.str(p.name);
        w.u64(p.value.rows);
        w.u64(p.value.cols);
        w.f64_array(p.value.data);
    });
}

Checkpoint load_checkpoint(const std::string& path) {
    io::Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "PQTC")
        throw std::runtime_error("not a checkpoint file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.model_cfg = read_model_cfg(r);
    ckpt.train_cfg = read_train_cfg(r);
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::uint64_t rows = r.u64();
        const std::uint64_t cols = r.u64();
        Matrix m(rows, cols, r.f64_array(rows * cols));
        ckpt.tensors.emplace_back(std::move(name), std::move(m));
    }
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model(ckpt.model_cfg);
    std::size_t idx = 0;
    model.visit_params([&](layers::Param& p) {
        if (idx >= ckpt.tensors.size())
            throw std::runtime_error("checkpoint: missing tensor for " + p.name);
        const auto& [name, value] = ckpt.tensors[idx++];
        if (name != p.name)
            throw std::runtime_error("checkpoint: expected tensor " + p.name + ", found " + name);
        if (value.rows != p.value.rows || value.cols != p.value.cols)
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
        p.value = value;
        if (!p.value.all_finite())
            throw std::runtime_error("checkpoint: non-finite values in " + p.name);
    });
    if (idx != ckpt.tensors.size())
        throw std::runtime_error("checkpoint: extra tensors beyond the model definition");
    return model;
}

}  // namespace pquant

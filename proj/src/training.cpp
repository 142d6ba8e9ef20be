#include "pquant/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace pquant::train {

SchedulePoint two_phase_schedule(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps)
        throw std::invalid_argument("schedule: step beyond total_steps");
    const std::size_t mid = cfg.midpoint();
    SchedulePoint p;
    p.wd = step <= mid ? cfg.wd_phase1 : cfg.wd_phase2;

    // Endpoint-exact interpolation: t = 0 and t = 1 return the configured
    // values bit for bit.
    auto lerp = [](double a, double b, double t) { return a * (1.0 - t) + b * t; };
    if (step < cfg.warmup_steps) {
        p.lr = lerp(0.0, cfg.peak_lr,
                    static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
    } else if (step <= mid) {
        p.lr = lerp(cfg.peak_lr, cfg.phase1_end_lr,
                    static_cast<double>(step - cfg.warmup_steps) /
                        static_cast<double>(mid - cfg.warmup_steps));
    } else {
        // Restart strictly below the phase-1 end value, then decay linearly.
        const std::size_t start = mid + 1;
        const double t = cfg.total_steps == start
                             ? 1.0
                             : static_cast<double>(step - start) /
                                   static_cast<double>(cfg.total_steps - start);
        p.lr = lerp(cfg.phase2_start_lr, cfg.final_lr, t);
    }
    return p;
}

AdamW::AdamW(Model& model, const TrainConfig& cfg)
    : beta1(cfg.adam_beta1), beta2(cfg.adam_beta2), eps(cfg.adam_eps) {
    model.visit_params([&](layers::Param& p) {
        m.emplace_back(p.value.rows, p.value.cols);
        v.emplace_back(p.value.rows, p.value.cols);
    });
}

void AdamW::update(Model& model, double lr, double wd) {
    step++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    std::size_t idx = 0;
    model.visit_params([&](layers::Param& p) {
        Matrix& mm = m[idx];
        Matrix& vv = v[idx];
        idx++;
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double g = p.grad.data[k];
            mm.data[k] = beta1 * mm.data[k] + (1.0 - beta1) * g;
            vv.data[k] = beta2 * vv.data[k] + (1.0 - beta2) * g * g;
            const double mhat = mm.data[k] / bc1;
            const double vhat = vv.data[k] / bc2;
            double upd = mhat / (std::sqrt(vhat) + eps);
            if (p.decay && wd != 0.0) upd += wd * p.value.data[k];
            p.value.data[k] -= lr * upd;
        }
    });
}

BatchSampler::BatchSampler(const std::vector<std::uint8_t>& data, const TrainConfig& cfg)
    : corpus(&data), seq_len(cfg.seq_len), n_seqs(cfg.batch_tokens / cfg.seq_len),
      rng(cfg.seed + 0x9e3779b97f4a7c15ull) {
    if (n_seqs == 0) n_seqs = 1;
    if (data.size() < seq_len + 2)
        throw std::invalid_argument("corpus too small for the configured sequence length");
}

void BatchSampler::next(std::vector<std::uint8_t>& inputs, std::vector<std::uint8_t>& targets) {
    inputs.resize(n_seqs * seq_len);
    targets.resize(n_seqs * seq_len);
    std::uniform_int_distribution<std::size_t> dist(0, corpus->size() - seq_len - 2);
    for (std::size_t s = 0; s < n_seqs; ++s) {
        const std::size_t off = dist(rng);
        for (std::size_t i = 0; i < seq_len; ++i) {
            inputs[s * seq_len + i] = (*corpus)[off + i];
            targets[s * seq_len + i] = (*corpus)[off + i + 1];
        }
    }
}

double clip_gradients(Model& model, double max_norm) {
    double sq = 0.0;
    model.visit_params([&](layers::Param& p) {
        for (double g : p.grad.data) sq += g * g;
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        model.visit_params([&](layers::Param& p) {
            for (double& g : p.grad.data) g *= scale;
        });
    }
    return norm;
}

Trainer::Trainer(Model& model, const TrainConfig& cfg, const std::vector<std::uint8_t>& corpus)
    : model_(model), cfg_(cfg), sampler_(corpus, cfg), opt_(model, cfg) {
    cfg_.validate();
    if (model.cfg.vocab_size > 256)
        throw std::invalid_argument("byte-level training needs vocab_size <= 256");
    if (cfg.seq_len > model.cfg.max_seq_len)
        throw std::invalid_argument("train config: seq_len exceeds the model's max_seq_len");
}

StepRecord Trainer::step() {
    const SchedulePoint sched = two_phase_schedule(step_, cfg_);

    std::vector<std::uint8_t> inputs, targets;
    sampler_.next(inputs, targets);

    model_.zero_grads();
    const Matrix logits = model_.forward(inputs, cfg_.seq_len);
    const double loss = model_.loss_and_backward(logits, targets);
    if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at step " + std::to_string(step_) +
                              " (gradient explosion); lower the learning rate or batch size");

    StepRecord rec;
    rec.step = step_;
    rec.loss = loss;
    rec.lr = sched.lr;
    rec.wd = sched.wd;
    const double norm = clip_gradients(model_, cfg_.grad_clip);
    rec.clipped = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip;

    const auto counts = model_.branch_counts();
    const double tokens = static_cast<double>(inputs.size() * model_.cfg.n_layers);
    for (std::size_t c : counts)
        rec.branch_util.push_back(tokens > 0 ? static_cast<double>(c) / tokens : 0.0);

    opt_.update(model_, sched.lr, sched.wd);
    step_++;
    return rec;
}

TrainResult Trainer::run(const std::string& metrics_path) {
    std::ofstream csv;
    if (!metrics_path.empty()) {
        csv.open(metrics_path);
        if (!csv) throw std::runtime_error("cannot open metrics file: " + metrics_path);
        csv << "step,loss,lr,wd";
        for (std::size_t k = 0; k < model_.cfg.n_branches; ++k) csv << ",branch_util_" << k;
        csv << "\n";
    }

    TrainResult result;
    for (std::size_t s = 0; s < cfg_.total_steps; ++s) {
        StepRecord rec = step();
        if (csv.is_open()) {
            csv.precision(10);
            csv << rec.step << ',' << rec.loss << ',' << rec.lr << ',' << rec.wd;
            for (double u : rec.branch_util) csv << ',' << u;
            csv << "\n";
        }
        result.final_loss = rec.loss;
        result.log.push_back(std::move(rec));
    }
    return result;
}

std::vector<std::uint8_t> read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    return data;
}

double unigram_entropy(const std::vector<std::uint8_t>& corpus) {
    if (corpus.empty()) return 0.0;
    std::vector<std::size_t> counts(256, 0);
    for (std::uint8_t b : corpus) counts[b]++;
    const double n = static_cast<double>(corpus.size());
    double h = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h;
}

std::string feature_scaling_table(Model& model) {
    std::ostringstream out;
    out << "layer,alpha,beta\n";
    out.precision(10);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        auto& f = model.blocks[l].ffn;
        if (model.cfg.n_branches == 0) continue;
        out << l << ',' << f.alpha.value.data[0] << ',' << f.beta.value.data[0] << "\n";
    }
    return out.str();
}

}  // namespace pquant::train

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pquant/model.hpp"

namespace pquant::train {

/// Raised when the loss stops being finite (gradient explosion).
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchedulePoint {
    double lr = 0.0;
    double wd = 0.0;
};

/// Warmup, then two linear phases with an lr restart and a weight-decay
/// step at the midpoint: warmup ramps 0 -> peak over [0, warmup); phase 1
/// decays peak -> phase1_end over [warmup, midpoint]; phase 2 decays
/// phase2_start -> final over [midpoint + 1, total]. wd is wd_phase1 through
/// the midpoint and wd_phase2 after it.
SchedulePoint two_phase_schedule(std::size_t step, const TrainConfig& cfg);

/// Adam with decoupled weight decay on the latent FP weights.
struct AdamW {
    double beta1, beta2, eps;
    std::size_t step = 0;
    std::vector<Matrix> m, v;

    AdamW(Model& model, const TrainConfig& cfg);
    void update(Model& model, double lr, double wd);
};

/// Deterministic batch sampler over a byte corpus.
struct BatchSampler {
    const std::vector<std::uint8_t>* corpus;
    std::size_t seq_len;
    std::size_t n_seqs;
    std::mt19937_64 rng;

    BatchSampler(const std::vector<std::uint8_t>& data, const TrainConfig& cfg);

    /// Fills inputs (n_seqs * seq_len tokens) and shifted targets.
    void next(std::vector<std::uint8_t>& inputs, std::vector<std::uint8_t>& targets);
};

struct StepRecord {
    std::size_t step;
    double loss;
    double lr;
    double wd;
    std::vector<double> branch_util;
    bool clipped = false;
};

struct TrainResult {
    std::vector<StepRecord> log;
    double final_loss = 0.0;
};

class Trainer {
  public:
    Trainer(Model& model, const TrainConfig& cfg, const std::vector<std::uint8_t>& corpus);

    /// One optimization step; returns the batch loss. Throws DivergenceError
    /// on non-finite loss.
    StepRecord step();

    /// Runs cfg.total_steps steps; optionally streams CSV rows to metrics_path.
    TrainResult run(const std::string& metrics_path = "");

    AdamW& optimizer() { return opt_; }

  private:
    Model& model_;
    TrainConfig cfg_;
    BatchSampler sampler_;
    AdamW opt_;
    std::size_t step_ = 0;
};

/// Global-norm gradient clip; returns the pre-clip norm.
double clip_gradients(Model& model, double max_norm);

std::vector<std::uint8_t> read_corpus(const std::string& path);

/// Unigram (byte-frequency) entropy of a corpus in nats; the training-sanity
/// oracle in the tests.
double unigram_entropy(const std::vector<std::uint8_t>& corpus);

/// CSV rows "layer,alpha,beta" for every decoupled FFN.
std::string feature_scaling_table(Model& model);

}  // namespace pquant::train

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pquant/config.hpp"
#include "pquant/layers.hpp"

namespace pquant {

/// Decoder-only character model: byte embedding + learned positions,
/// pre-norm pQuant blocks, final RMSNorm, full-precision LM head.
struct Model {
    ModelConfig cfg;
    layers::Param tok_emb;  // vocab x d_model
    layers::Param pos_emb;  // max_seq_len x d_model
    std::vector<layers::TransformerBlock> blocks;
    layers::RmsNorm final_norm;
    layers::Param lm_head;  // vocab x d_model

    explicit Model(const ModelConfig& c);

    /// Seeded Gaussian init; residual-feeding projections scaled down by layer count.
    void init_params(std::uint64_t seed);

    void visit_params(const layers::ParamVisitor& v);
    std::size_t param_count();
    void zero_grads();

    /// tokens laid out as batch*seq_len; returns logits (batch*seq_len x vocab).
    /// tap_layer (when >= 0) collects FFN down-projection inputs of that block.
    Matrix forward(const std::vector<std::uint8_t>& tokens, std::size_t seq_len,
                   long tap_layer = -1, layers::FfnTap* tap = nullptr);

    /// Mean next-token cross-entropy (nats) and gradient injection.
    double loss_and_backward(const Matrix& logits, const std::vector<std::uint8_t>& targets);

    /// Forward-only loss, no gradients.
    double loss_only(const Matrix& logits, const std::vector<std::uint8_t>& targets) const;

    /// Pack every quantized layer and drop latent weights.
    void freeze();
    bool frozen() const { return frozen_; }
    void mark_frozen() { frozen_ = true; }  // used by the packed-model loader

    /// Router utilization counts aggregated over all blocks for the last forward.
    std::vector<std::size_t> branch_counts() const;

  private:
    Matrix x_cache_;  // embedding output
    std::vector<std::uint8_t> tokens_cache_;
    std::size_t seq_len_cache_ = 0;
    bool frozen_ = false;

  public:
    /// Backward from logits gradient to parameter gradients.
    void backward(const Matrix& dlogits);

  private:
    Matrix final_in_cache_;
};

// Checkpoint container: magic "PQTC", version, configs, tensors in
// declaration order (u64 little-endian lengths, f64 little-endian values).
void save_checkpoint(Model& model, const TrainConfig& tcfg, const std::string& path);

struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    std::vector<std::pair<std::string, Matrix>> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

/// Rebuild a training-mode model from a checkpoint (tensor names must match
/// the declaration order of the reconstructed model).
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace pquant

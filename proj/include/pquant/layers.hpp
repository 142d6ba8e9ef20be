#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pquant/kernels.hpp"
#include "pquant/matrix.hpp"
#include "pquant/quant.hpp"

namespace pquant::layers {

enum class Mode { training, inference };

/// A trainable tensor: value, gradient accumulator, weight-decay flag.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    bool decay = true;

    Param() = default;
    Param(std::string n, std::size_t rows, std::size_t cols, bool d = true)
        : name(std::move(n)), value(rows, cols), grad(rows, cols), decay(d) {}

    void zero_grad() { grad.fill(0.0); }
};

using ParamVisitor = std::function<void(Param&)>;

// -- elementwise / normalization ---------------------------------------------

Matrix silu(const Matrix& x);
Matrix silu_backward(const Matrix& x, const Matrix& dy);

/// y_ij = gain_j * x_ij / sqrt(mean_j(x_ij^2) + eps)
Matrix rmsnorm(const Matrix& x, const Matrix& gain, double eps);

void softmax_row(double* p, std::size_t n);

struct RmsNorm {
    Param gain;
    double eps;

    RmsNorm(std::string name, std::size_t d, double epsilon = 1e-6)
        : gain(std::move(name), 1, d), eps(epsilon) {
        gain.value.fill(1.0);
        gain.decay = false;
    }

    Matrix forward(const Matrix& x);
    Matrix backward(const Matrix& dy);
    void visit(const ParamVisitor& v) { v(gain); }

  private:
    Matrix x_cache;
    std::vector<double> rms_cache;
};

// -- 1-bit linear --------------------------------------------------------------

struct BitLinearGrad {
    Matrix dx;
    double dpath = 0.0;  // gradient of the caller-owned path constant
};

/// The quantization-native linear layer: latent FP weights binarized per
/// forward in training mode, packed sign bits + a fused scale in inference
/// mode. The caller-supplied path constant (a branch scalar such as beta) is
/// folded into the dequantization scale before the per-token division so
/// both modes apply scales in the same order.
struct BitLinear {
    Mode mode = Mode::training;
    std::size_t out_features = 0;
    std::size_t in_features = 0;
    Param weight;                // FP latent copy; training only
    quant::BinaryMatrix packed;  // inference only
    double fused_scale = 0.0;    // inference only: path_const * lambda at export

    BitLinear(std::string name, std::size_t out, std::size_t in)
        : out_features(out), in_features(in), weight(std::move(name), out, in) {}

    Matrix forward(const Matrix& x, double path_const = 1.0);
    BitLinearGrad backward(const Matrix& dy);

    /// Drop the latent weights, keep packed bits and the fused scale.
    void freeze(double path_const);

    void visit(const ParamVisitor& v) {
        if (mode == Mode::training) v(weight);
    }

  private:
    quant::Int8Tensor qx_cache;
    std::vector<std::int8_t> signs_cache;
    kernels::AccumulatorMatrix acc_cache;
    double lambda_cache = 0.0;
    double path_cache = 1.0;
};

// -- INT8 linear (high-precision branch projections) ---------------------------

/// Weights AbsMax-quantized per output row, activations per token; the
/// integer product is rescaled by 1/(gamma_w * gamma_x).
struct Int8Linear {
    Mode mode = Mode::training;
    std::size_t out_features = 0;
    std::size_t in_features = 0;
    Param weight;
    quant::Int8Tensor packed;  // inference only

    Int8Linear(std::string name, std::size_t out, std::size_t in)
        : out_features(out), in_features(in), weight(std::move(name), out, in) {}

    Matrix forward(const Matrix& x);
    Matrix backward(const Matrix& dy);
    void freeze();

    void visit(const ParamVisitor& v) {
        if (mode == Mode::training) v(weight);
    }

  private:
    quant::Int8Tensor qx_cache;
    quant::Int8Tensor qw_cache;
    kernels::AccumulatorMatrix acc_cache;
};

// -- routing -------------------------------------------------------------------

/// Top-1 softmax gating: returns (argmax branch, its probability).
/// Ties break toward the lowest index.
std::pair<std::size_t, double> router_select(const Matrix& router, const double* x_token);

/// Calibration tap: records the float inputs of both down projections
/// (post-activation hidden states) during a forward pass.
struct FfnTap {
    std::vector<std::vector<double>> bit_hidden;          // rows of width h1
    std::vector<std::vector<std::vector<double>>> hp_hidden;  // per branch, rows of width r
};

/// The decoupled FFN: a 1-bit two-matrix MLP over width d_ffn_nominal - r
/// plus N routed INT8 MLPs of width r, recombined as
/// y = alpha * gate * HP_k(x) + beta * Bit(x). n_branches == 0 selects the
/// pure 1-bit baseline (full nominal width, no router, no feature scaling).
struct DecoupledLinear {
    std::size_t d_model = 0;
    std::size_t r = 0;
    std::size_t n_branches = 0;
    BitLinear bit_up, bit_down;
    struct HpBranch {
        Int8Linear up, down;
    };
    std::vector<HpBranch> hp;
    Param router;  // N x d_model
    Param alpha;   // 1x1
    Param beta;    // 1x1

    DecoupledLinear(const std::string& prefix, std::size_t d, std::size_t d_ffn_nominal,
                    std::size_t r_width, std::size_t n);

    Matrix forward(const Matrix& x, FfnTap* tap = nullptr);
    Matrix backward(const Matrix& dy);
    void freeze();
    void visit(const ParamVisitor& v);

    /// Tokens routed to each branch in the last forward.
    const std::vector<std::size_t>& last_branch_counts() const { return branch_counts_; }

    /// The exported alpha value once frozen (the 8-bit path's fused constant).
    double fused_alpha() const { return fused_alpha_; }
    void set_fused_alpha(double v) { fused_alpha_ = v; }

  private:
    Matrix forward_packed(const Matrix& x);

    double fused_alpha_ = 0.0;
    Matrix silu_in_bit_;                 // bit-branch up output (pre-activation)
    std::vector<Matrix> silu_in_hp_;     // per branch
    std::vector<std::vector<std::size_t>> branch_tokens_;
    std::vector<std::size_t> branch_counts_;
    std::vector<std::size_t> token_branch_;
    std::vector<double> token_gate_;
    Matrix probs_;      // T x N softmax probabilities
    Matrix hp_out_;     // T x d_model, routed branch outputs before alpha*gate
    Matrix x_cache_;
};

// -- attention -----------------------------------------------------------------

/// Causal score/softmax/mix core, float throughout. Kept as free functions
/// so the backward can be finite-difference checked without the quantized
/// projections around it.
struct AttentionCache {
    std::size_t seq_len = 0;
    std::size_t n_heads = 0;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // one (seq x seq) lower-triangular matrix per (sequence, head)
};

Matrix attention_core(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t seq_len,
                      std::size_t n_heads, AttentionCache* cache = nullptr);

void attention_core_backward(const AttentionCache& cache, const Matrix& dctx, Matrix& dq,
                             Matrix& dk, Matrix& dv);

/// Causal multi-head attention with all four projections 1-bit. Scores and
/// the softmax run in float; only the linear maps are quantized.
struct MultiHeadAttention {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    BitLinear wq, wk, wv, wo;

    MultiHeadAttention(const std::string& prefix, std::size_t d, std::size_t heads);

    /// x has batch*seq_len rows; causal attention runs within each sequence.
    Matrix forward(const Matrix& x, std::size_t seq_len);
    Matrix backward(const Matrix& dy);
    void freeze();
    void visit(const ParamVisitor& v);

  private:
    AttentionCache cache_;
};

// -- block ----------------------------------------------------------------------

/// Pre-norm residual block: x + MHA(norm(x)), then x + FFN(norm(x)).
struct TransformerBlock {
    RmsNorm norm1, norm2;
    MultiHeadAttention attn;
    DecoupledLinear ffn;

    TransformerBlock(const std::string& prefix, std::size_t d_model, std::size_t n_heads,
                     std::size_t d_ffn_nominal, std::size_t r, std::size_t n_branches);

    Matrix forward(const Matrix& x, std::size_t seq_len, FfnTap* tap = nullptr);
    Matrix backward(const Matrix& dy);
    void freeze();
    void visit(const ParamVisitor& v);
};

}  // namespace pquant::layers

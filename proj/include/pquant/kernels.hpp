#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pquant/quant.hpp"

namespace pquant::kernels {

/// Exact 32-bit integer accumulators. No overflow for cols <= 65536 with
/// INT8 activations (|sum| <= cols * 128 < 2^31).
using AccumulatorVector = std::vector<std::int32_t>;

struct AccumulatorMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> values;

    std::int32_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Precomputed partial sums for one activation row: per group of 4 INT8
/// activations, the 16 sums over all sign patterns (bit k set -> +a_k,
/// clear -> -a_k). Activations past the row length count as zero, so the
/// padded lanes contribute nothing whatever the weight bits say.
struct LookupTable {
    std::size_t cols = 0;    // unpadded activation length
    std::size_t groups = 0;  // ceil(cols / 4)
    std::vector<std::int32_t> entries;  // groups * 16, indexed [g * 16 + pattern]

    std::int32_t entry(std::size_t group, unsigned pattern) const {
        return entries[group * 16 + pattern];
    }
};

/// Scalar reference W1A8 GEMV: out_i = sum_j sign_ij * a_j.
AccumulatorVector gemv_w1a8_ref(const quant::BinaryMatrix& w, std::span<const std::int8_t> a);

/// Batched reference W1A8: one activation row per token. Signs are unpacked
/// once; used by the training-mode forward.
AccumulatorMatrix gemm_w1a8_ref(const quant::BinaryMatrix& w, const quant::Int8Tensor& a);

LookupTable build_lut(std::span<const std::int8_t> a);

/// Table-lookup W1A8 GEMV; bit-exact equal to gemv_w1a8_ref by construction.
AccumulatorVector gemv_w1a8_lut(const quant::BinaryMatrix& w, const LookupTable& lut);

/// Exact INT32 accumulation of INT8 weights (rows = out features) against
/// INT8 activations (rows = tokens). Caller applies (1/gamma_w)*(1/gamma_a).
AccumulatorMatrix gemm_int8(const quant::Int8Tensor& w, const quant::Int8Tensor& a);

/// Both up-projection branches of the FFN from a single activation read:
/// the shared INT8 row feeds one lookup table for the 1-bit branch and the
/// INT8 dot products of the 8-bit branch. Each output equals its standalone
/// kernel's result exactly.
std::pair<AccumulatorVector, AccumulatorVector> fused_ffn_first_gemm(
    const quant::BinaryMatrix& up_1bit, const quant::Int8Tensor& up_8bit,
    std::span<const std::int8_t> a);

}  // namespace pquant::kernels

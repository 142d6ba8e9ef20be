#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pquant/model.hpp"

namespace pquant::infer {

/// Binarize and quantize every weight of a checkpoint once, fuse the static
/// scalars, and write the PQTM container. Byte-for-byte deterministic.
void export_packed(const Checkpoint& ckpt, const std::string& path);

/// Load a PQTM file as a frozen model (packed bits + fused scales; no FP
/// latent copies).
Model load_packed(const std::string& path);

/// Greedy argmax decoding. Works on either mode; the packed path runs the
/// LUT GEMV / INT8 GEMM kernels. Context slides when it exceeds max_seq_len.
std::vector<std::uint8_t> generate(Model& model, const std::vector<std::uint8_t>& prompt,
                                   std::size_t n_tokens);

// -- analytic accounting ------------------------------------------------------

/// Storage width (bits) per component class. The defaults are the pQuant
/// plan; fp16() selects the uniform half-precision baseline.
struct PrecisionPlan {
    unsigned onebit_bits = 1;
    unsigned int8_bits = 8;
    unsigned embedding_bits = 16;
    unsigned norm_bits = 16;
    unsigned router_bits = 16;
    unsigned scale_bits = 16;
    bool uniform = false;  // true: every class stored at embedding_bits

    static PrecisionPlan fp16() {
        PrecisionPlan p;
        p.onebit_bits = p.int8_bits = p.embedding_bits = p.norm_bits = p.router_bits =
            p.scale_bits = 16;
        p.uniform = true;
        return p;
    }
};

struct FootprintReport {
    std::uint64_t onebit_bytes = 0;
    std::uint64_t int8_bytes = 0;
    std::uint64_t embedding_bytes = 0;
    std::uint64_t norm_bytes = 0;
    std::uint64_t router_bytes = 0;
    std::uint64_t scale_bytes = 0;
    std::uint64_t total_bytes = 0;

    /// Weights moved per decoded token: the 1-bit backbone, one 8-bit branch
    /// per layer with its scales, embeddings and norms. The router is
    /// excluded so the figure is exactly independent of N.
    std::uint64_t transfer_bytes = 0;

    std::uint64_t total_params = 0;
    std::uint64_t activated_params = 0;

    /// Parameter-weighted storage bits across the quantized linear-layer
    /// weight classes (embeddings excluded, matching the paper's convention).
    double effective_bits = 0.0;
};

FootprintReport memory_footprint(const ModelConfig& cfg, const PrecisionPlan& plan);

/// Effective bit-width from published percentage splits of the quantized
/// backbone, e.g. (0.96, 0.04) -> 1.28.
double effective_bits_from_split(double frac_1bit, double frac_8bit);

std::string footprint_csv(const FootprintReport& r);
std::string footprint_summary(const FootprintReport& r);

// -- microbenchmarks ------------------------------------------------------------

struct BenchRow {
    std::string kernel;
    std::size_t rows = 0;
    std::size_t cols = 0;
    double median_ns = 0.0;
    std::size_t reps = 0;
};

/// Times the reference GEMV, LUT GEMV, INT8 GEMM and a float matmul baseline
/// per size. Every kernel's bit-exactness is asserted before timing.
std::vector<BenchRow> bench_kernels(const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                    std::size_t reps);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace pquant::infer

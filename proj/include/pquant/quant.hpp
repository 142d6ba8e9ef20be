#pragma once

#include <cstdint>
#include <vector>

#include "pquant/matrix.hpp"

namespace pquant::quant {

/// A 1-bit weight matrix: packed sign bits plus the per-tensor statistics
/// used for dequantization. Bit layout is normative (it is the wire format
/// of the PackedModel file): row-major, 8 weights per byte, LSB first,
/// bit 1 encodes +1, final byte zero-padded.
struct BinaryMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bits;
    double mu = 0.0;      // per-tensor weight mean
    double lambda = 0.0;  // per-tensor absmean dequantization scale

    std::size_t packed_size() const { return (rows * cols + 7) / 8; }

    int sign_at(std::size_t r, std::size_t c) const {
        std::size_t k = r * cols + c;
        return (bits[k >> 3] >> (k & 7)) & 1 ? +1 : -1;
    }
};

/// INT8 values with one positive scale per row (the token dimension for
/// activations, the output-channel dimension for branch weights).
struct Int8Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;
    std::vector<double> gamma;  // per-row scale; quantized = round(x * gamma)

    std::int8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    const std::int8_t* row(std::size_t r) const { return values.data() + r * cols; }
};

// -- bit packing ------------------------------------------------------------

std::vector<std::uint8_t> pack_bits(const std::vector<std::int8_t>& signs);
std::vector<std::int8_t> unpack_bits(const std::vector<std::uint8_t>& buffer, std::size_t count);

// -- 1-bit weight quantization ----------------------------------------------

/// Center weights to zero mean, binarize by sign (ties at zero map to +1),
/// scale = mean absolute value. Throws on empty or non-finite input.
BinaryMatrix binarize(const Matrix& w);

/// lambda * sign reconstruction.
Matrix dequantize_weight(const BinaryMatrix& b);

/// Decoded +/-1 signs, row-major.
std::vector<std::int8_t> unpack_signs(const BinaryMatrix& b);

// -- INT8 AbsMax quantization -----------------------------------------------

/// Per-row AbsMax: gamma = 127 / max|x|, values clamped to [-128, 127],
/// rounding half away from zero. An all-zero row gets gamma = 1.
Int8Tensor absmax_quantize(const Matrix& x);

/// values / gamma per row.
Matrix dequantize_activation(const Int8Tensor& q);

/// AbsMax over each output row of a weight matrix. The dequantization step
/// (1/gamma) is rounded to the nearest fp16 so the stored per-row scales in
/// the packed file reproduce training-time math bit for bit.
Int8Tensor absmax_quantize_weights(const Matrix& w);

// -- fp16 helpers (scale storage format) --------------------------------------

std::uint16_t fp16_encode(double v);
double fp16_decode(std::uint16_t h);

/// Round to the nearest value representable in IEEE binary16.
inline double fp16_round(double v) { return fp16_decode(fp16_encode(v)); }

}  // namespace pquant::quant

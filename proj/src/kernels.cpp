#include "pquant/kernels.hpp"

#include <stdexcept>

namespace pquant::kernels {

namespace {

inline int bit_sign(const std::vector<std::uint8_t>& bits, std::size_t k) {
    return (bits[k >> 3] >> (k & 7)) & 1 ? +1 : -1;
}

}  // namespace

AccumulatorVector gemv_w1a8_ref(const quant::BinaryMatrix& w, std::span<const std::int8_t> a) {
    if (w.cols != a.size())
        throw std::invalid_argument("gemv_w1a8_ref: dimension mismatch");
    AccumulatorVector out(w.rows, 0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        std::int32_t acc = 0;
        const std::size_t base = i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j)
            acc += bit_sign(w.bits, base + j) * static_cast<std::int32_t>(a[j]);
        out[i] = acc;
    }
    return out;
}

AccumulatorMatrix gemm_w1a8_ref(const quant::BinaryMatrix& w, const quant::Int8Tensor& a) {
    if (w.cols != a.cols)
        throw std::invalid_argument("gemm_w1a8_ref: dimension mismatch");
    const std::vector<std::int8_t> signs = quant::unpack_signs(w);
    AccumulatorMatrix out;
    out.rows = a.rows;
    out.cols = w.rows;
    out.values.assign(out.rows * out.cols, 0);
#pragma omp parallel for schedule(static)
    for (long long t = 0; t < static_cast<long long>(a.rows); ++t) {
        const std::int8_t* av = a.row(static_cast<std::size_t>(t));
        for (std::size_t i = 0; i < w.rows; ++i) {
            const std::int8_t* sv = signs.data() + i * w.cols;
            std::int32_t acc = 0;
            for (std::size_t j = 0; j < w.cols; ++j)
                acc += sv[j] > 0 ? av[j] : -av[j];
            out.values[static_cast<std::size_t>(t) * out.cols + i] = acc;
        }
    }
    return out;
}

LookupTable build_lut(std::span<const std::int8_t> a) {
    LookupTable lut;
    lut.cols = a.size();
    lut.groups = (a.size() + 3) / 4;
    lut.entries.assign(lut.groups * 16, 0);
    for (std::size_t g = 0; g < lut.groups; ++g) {
        std::int32_t av[4] = {0, 0, 0, 0};
        for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t j = g * 4 + k;
            if (j < a.size()) av[k] = a[j];
        }
        for (unsigned p = 0; p < 16; ++p) {
            std::int32_t s = 0;
            for (unsigned k = 0; k < 4; ++k) s += (p >> k) & 1u ? av[k] : -av[k];
            lut.entries[g * 16 + p] = s;
        }
    }
    return lut;
}

AccumulatorVector gemv_w1a8_lut(const quant::BinaryMatrix& w, const LookupTable& lut) {
    if (w.cols != lut.cols || lut.groups != (w.cols + 3) / 4)
        throw std::invalid_argument("gemv_w1a8_lut: table does not match weight columns");
    AccumulatorVector out(w.rows, 0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const std::size_t base = i * w.cols;
        std::int32_t acc = 0;
        for (std::size_t g = 0; g < lut.groups; ++g) {
            unsigned pattern = 0;
            for (unsigned k = 0; k < 4; ++k) {
                const std::size_t j = g * 4 + k;
                // Padded lanes read as zero bits; their table contribution
                // is +/-0 either way.
                if (j < w.cols && bit_sign(w.bits, base + j) > 0) pattern |= 1u << k;
            }
            acc += lut.entries[g * 16 + pattern];
        }
        out[i] = acc;
    }
    return out;
}

AccumulatorMatrix gemm_int8(const quant::Int8Tensor& w, const quant::Int8Tensor& a) {
    if (w.cols != a.cols)
        throw std::invalid_argument("gemm_int8: dimension mismatch");
    AccumulatorMatrix out;
    out.rows = a.rows;
    out.cols = w.rows;
    out.values.assign(out.rows * out.cols, 0);
#pragma omp parallel for schedule(static)
    for (long long t = 0; t < static_cast<long long>(a.rows); ++t) {
        const std::int8_t* av = a.row(static_cast<std::size_t>(t));
        for (std::size_t i = 0; i < w.rows; ++i) {
            const std::int8_t* wv = w.row(i);
            std::int32_t acc = 0;
            for (std::size_t j = 0; j < w.cols; ++j)
                acc += static_cast<std::int32_t>(wv[j]) * static_cast<std::int32_t>(av[j]);
            out.values[static_cast<std::size_t>(t) * out.cols + i] = acc;
        }
    }
    return out;
}

std::pair<AccumulatorVector, AccumulatorVector> fused_ffn_first_gemm(
    const quant::BinaryMatrix& up_1bit, const quant::Int8Tensor& up_8bit,
    std::span<const std::int8_t> a) {
    if (up_1bit.cols != a.size() || up_8bit.cols != a.size())
        throw std::invalid_argument("fused_ffn_first_gemm: dimension mismatch");

    const LookupTable lut = build_lut(a);
    AccumulatorVector bit_out = gemv_w1a8_lut(up_1bit, lut);

    AccumulatorVector hp_out(up_8bit.rows, 0);
    for (std::size_t i = 0; i < up_8bit.rows; ++i) {
        const std::int8_t* wv = up_8bit.row(i);
        std::int32_t acc = 0;
        for (std::size_t j = 0; j < a.size(); ++j)
            acc += static_cast<std::int32_t>(wv[j]) * static_cast<std::int32_t>(a[j]);
        hp_out[i] = acc;
    }
    return {std::move(bit_out), std::move(hp_out)};
}

}  // namespace pquant::kernels

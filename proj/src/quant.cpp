#include "pquant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pquant::quant {

std::vector<std::uint8_t> pack_bits(const std::vector<std::int8_t>& signs) {
    std::vector<std::uint8_t> out((signs.size() + 7) / 8, 0);
    for (std::size_t k = 0; k < signs.size(); ++k) {
        if (signs[k] > 0) out[k >> 3] |= static_cast<std::uint8_t>(1u << (k & 7));
    }
    return out;
}

std::vector<std::int8_t> unpack_bits(const std::vector<std::uint8_t>& buffer, std::size_t count) {
    if (buffer.size() != (count + 7) / 8)
        throw std::invalid_argument("unpack_bits: buffer size does not match element count");
    std::vector<std::int8_t> signs(count);
    for (std::size_t k = 0; k < count; ++k)
        signs[k] = (buffer[k >> 3] >> (k & 7)) & 1 ? +1 : -1;
    return signs;
}

BinaryMatrix binarize(const Matrix& w) {
    if (w.empty()) throw std::invalid_argument("binarize: empty matrix");
    require_finite(w, "binarize");

    double sum = 0.0, abs_sum = 0.0;
    for (double v : w.data) {
        sum += v;
        abs_sum += std::fabs(v);
    }
    const double n = static_cast<double>(w.size());

    BinaryMatrix b;
    b.rows = w.rows;
    b.cols = w.cols;
    b.mu = sum / n;
    b.lambda = abs_sum / n;
    b.bits.assign(b.packed_size(), 0);
    for (std::size_t k = 0; k < w.size(); ++k) {
        // Sign(0) := +1, so the bit is set when w - mu >= 0.
        if (w.data[k] - b.mu >= 0.0) b.bits[k >> 3] |= static_cast<std::uint8_t>(1u << (k & 7));
    }
    return b;
}

Matrix dequantize_weight(const BinaryMatrix& b) {
    Matrix w(b.rows, b.cols);
    for (std::size_t k = 0; k < w.size(); ++k) {
        int s = (b.bits[k >> 3] >> (k & 7)) & 1 ? +1 : -1;
        w.data[k] = b.lambda * s;
    }
    return w;
}

std::vector<std::int8_t> unpack_signs(const BinaryMatrix& b) {
    return unpack_bits(b.bits, b.rows * b.cols);
}

namespace {

std::int8_t clamp_i8(double v) {
    // Round half away from zero, then saturate to the signed 8-bit range.
    double r = std::round(v);
    if (r < -128.0) r = -128.0;
    if (r > 127.0) r = 127.0;
    return static_cast<std::int8_t>(r);
}

double row_absmax(const double* p, std::size_t n) {
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, std::fabs(p[j]));
    return m;
}

}  // namespace

Int8Tensor absmax_quantize(const Matrix& x) {
    require_finite(x, "absmax_quantize");
    Int8Tensor q;
    q.rows = x.rows;
    q.cols = x.cols;
    q.values.resize(x.size());
    q.gamma.resize(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double m = row_absmax(x.row(i), x.cols);
        if (m == 0.0) {
            q.gamma[i] = 1.0;
            std::memset(q.values.data() + i * x.cols, 0, x.cols);
            continue;
        }
        const double g = 127.0 / m;
        q.gamma[i] = g;
        for (std::size_t j = 0; j < x.cols; ++j)
            q.values[i * x.cols + j] = clamp_i8(x(i, j) * g);
    }
    return q;
}

Matrix dequantize_activation(const Int8Tensor& q) {
    Matrix x(q.rows, q.cols);
    for (std::size_t i = 0; i < q.rows; ++i) {
        const double inv = 1.0 / q.gamma[i];
        for (std::size_t j = 0; j < q.cols; ++j) x(i, j) = q.values[i * q.cols + j] * inv;
    }
    return x;
}

Int8Tensor absmax_quantize_weights(const Matrix& w) {
    require_finite(w, "absmax_quantize_weights");
    Int8Tensor q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.values.resize(w.size());
    q.gamma.resize(w.rows);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double m = row_absmax(w.row(i), w.cols);
        const double scale = m == 0.0 ? 0.0 : fp16_round(m / 127.0);
        if (scale == 0.0) {
            // All-zero row, or absmax small enough to underflow fp16.
            q.gamma[i] = 1.0;
            std::memset(q.values.data() + i * w.cols, 0, w.cols);
            continue;
        }
        const double g = 1.0 / scale;
        q.gamma[i] = g;
        for (std::size_t j = 0; j < w.cols; ++j)
            q.values[i * w.cols + j] = clamp_i8(w(i, j) * g);
    }
    return q;
}

std::uint16_t fp16_encode(double v) {
    const float f = static_cast<float>(v);
    std::uint32_t x;
    std::memcpy(&x, &f, 4);

    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t mant = x & 0x007fffffu;
    int exp = static_cast<int>((x >> 23) & 0xffu);

    if (exp == 0xff)  // Inf/NaN
        return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));

    exp = exp - 127 + 15;
    if (exp >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow -> Inf
    if (exp <= 0) {
        if (exp < -10) return sign;  // underflow -> 0
        // Subnormal half: shift the implicit leading 1 into the mantissa.
        std::uint32_t m = mant | 0x00800000u;
        const int shift = 14 - exp;
        std::uint32_t half = m >> shift;
        const std::uint32_t rem = m & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) half++;
        return static_cast<std::uint16_t>(sign | half);
    }

    // Normal: round mantissa to 10 bits, ties to even.
    std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++;  // may carry into exp
    return static_cast<std::uint16_t>(sign | half);
}

double fp16_decode(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            // Normalize the subnormal.
            int e = -1;
            std::uint32_t m = mant;
            while (!(m & 0x400u)) {
                m <<= 1;
                e--;
            }
            x = sign | static_cast<std::uint32_t>((e + 1 - 15 + 127) << 23) | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return static_cast<double>(f);
}

}  // namespace pquant::quant

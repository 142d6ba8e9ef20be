#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace pquant {

/// Dense row-major matrix of doubles; the one float tensor type shared by
/// every module. Vectors are 1xN or Nx1 matrices, scalars 1x1.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols)
            throw std::invalid_argument("Matrix: value count does not match shape");
    }

    std::size_t size() const { return rows * cols; }
    bool empty() const { return rows == 0 || cols == 0; }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline Matrix zeros_like(const Matrix& m) { return Matrix(m.rows, m.cols); }

/// Gaussian init, mean 0. Deterministic for a given generator state.
inline Matrix randn(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : m.data) v = dist(rng);
    return m;
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite())
        throw std::invalid_argument(std::string(what) + ": non-finite values");
}

// Dense products used by the float paths (embeddings, head, attention,
// router). Each output element is accumulated by a single thread, so results
// are bit-identical regardless of the thread count.

/// a (m x k) * b^T (n x k) -> (m x n); the x-times-weight pattern.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// a^T (k x m) * b (k x n) -> (m x n); the grad-times-input pattern.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// a (m x k) * b (k x n) -> (m x n).
Matrix matmul_nn(const Matrix& a, const Matrix& b);

}  // namespace pquant

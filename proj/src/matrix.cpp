#include "pquant/matrix.hpp"

namespace pquant {

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Matrix out(a.rows, b.rows);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(a.rows); ++i) {
        const double* ar = a.row(static_cast<std::size_t>(i));
        double* orow = out.row(static_cast<std::size_t>(i));
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
            orow[j] = acc;
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimension mismatch");
    Matrix out(a.cols, b.cols);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(a.cols); ++i) {
        double* orow = out.row(static_cast<std::size_t>(i));
        for (std::size_t t = 0; t < a.rows; ++t) {
            const double coef = a(t, static_cast<std::size_t>(i));
            if (coef == 0.0) continue;
            const double* br = b.row(t);
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += coef * br[j];
        }
    }
    return out;
}

Matrix matmul_nn(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul_nn: inner dimension mismatch");
    Matrix out(a.rows, b.cols);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(a.rows); ++i) {
        const double* ar = a.row(static_cast<std::size_t>(i));
        double* orow = out.row(static_cast<std::size_t>(i));
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double coef = ar[k];
            if (coef == 0.0) continue;
            const double* br = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += coef * br[j];
        }
    }
    return out;
}

}  // namespace pquant

#include "pquant/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "pquant/quant.hpp"

namespace pquant::sens {

namespace {

constexpr double kLogOffset = 1e-12;

/// In-place Cholesky factorization A = L L^T (lower triangle). Returns false
/// when a pivot is not strictly positive.
bool cholesky(Matrix& a) {
    const std::size_t n = a.rows;
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 0.0)) return false;
        const double l = std::sqrt(d);
        a(j, j) = l;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = a(i, j);
            for (std::size_t k = 0; k < j; ++k) v -= a(i, k) * a(j, k);
            a(i, j) = v / l;
        }
    }
    return true;
}

/// Solves L L^T x = b given the Cholesky factor in the lower triangle.
void cholesky_solve(const Matrix& l, std::vector<double>& b) {
    const std::size_t n = l.rows;
    for (std::size_t i = 0; i < n; ++i) {
        double v = b[i];
        for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * b[k];
        b[i] = v / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
        double v = b[i];
        for (std::size_t k = i + 1; k < n; ++k) v -= l(k, i) * b[k];
        b[i] = v / l(i, i);
    }
}

Matrix damped_hessian(const CalibrationSet& cal, double damping) {
    const std::size_t n = cal.in_features();
    if (n == 0 || cal.n_samples() == 0)
        throw std::invalid_argument("calibration set must be non-empty");
    require_finite(cal.x, "calibration set");
    if (damping < 0.0) throw std::invalid_argument("damping must be non-negative");

    Matrix h(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        const double* ra = cal.x.row(a);
        for (std::size_t b = a; b < n; ++b) {
            const double* rb = cal.x.row(b);
            double acc = 0.0;
            for (std::size_t s = 0; s < cal.n_samples(); ++s) acc += ra[s] * rb[s];
            h(a, b) = acc;
            h(b, a) = acc;
        }
    }
    if (damping > 0.0) {
        double trace = 0.0;
        for (std::size_t k = 0; k < n; ++k) trace += h(k, k);
        const double shift = damping * trace / static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) h(k, k) += shift;
    }
    return h;
}

}  // namespace

HessianInverse build_hessian_inverse(const CalibrationSet& cal, double damping) {
    Matrix h = damped_hessian(cal, damping);
    const std::size_t n = h.rows;

    Matrix l = h;
    if (!cholesky(l))
        throw SingularHessianError(
            "calibration Hessian is singular; rerun with nonzero damping");

    HessianInverse out;
    out.damping = damping;
    out.h_inv = Matrix(n, n);
    std::vector<double> col(n);
    for (std::size_t j = 0; j < n; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[j] = 1.0;
        cholesky_solve(l, col);
        for (std::size_t i = 0; i < n; ++i) out.h_inv(i, j) = col[i];
    }
    // Symmetrize away solver roundoff.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (out.h_inv(i, j) + out.h_inv(j, i));
            out.h_inv(i, j) = v;
            out.h_inv(j, i) = v;
        }
    for (std::size_t i = 0; i < n; ++i)
        if (!(out.h_inv(i, i) > 0.0))
            throw SingularHessianError("inverse Hessian has a non-positive diagonal entry");
    return out;
}

SensitivityMap sensitivity_closed_form(const Matrix& w, const HessianInverse& hinv,
                                       const QuantRule& q) {
    if (w.cols != hinv.h_inv.rows)
        throw std::invalid_argument("sensitivity: weight columns must match Hessian dimension");
    SensitivityMap map;
    map.s = Matrix(w.rows, w.cols);
    for (std::size_t i = 0; i < w.rows; ++i)
        for (std::size_t j = 0; j < w.cols; ++j) {
            const double d = w(i, j) - q(w(i, j));
            map.s(i, j) = d * d / (2.0 * hinv.h_inv(j, j));
        }
    return map;
}

double sensitivity_bruteforce(const Matrix& w, const CalibrationSet& cal, std::size_t i,
                              std::size_t j, const QuantRule& q, double damping) {
    if (i >= w.rows || j >= w.cols)
        throw std::invalid_argument("sensitivity_bruteforce: index out of range");
    if (w.cols != cal.in_features())
        throw std::invalid_argument("sensitivity_bruteforce: dimension mismatch");
    const std::size_t n = w.cols;
    const Matrix h = damped_hessian(cal, damping);
    const double delta_j = q(w(i, j)) - w(i, j);

    // Rows decouple in ||WX - W'X||^2, so only row i matters. Fix delta_j and
    // minimize delta^T H delta over the free entries via the normal equations.
    std::vector<double> delta(n, 0.0);
    delta[j] = delta_j;
    if (n > 1) {
        Matrix hff(n - 1, n - 1);
        std::vector<double> rhs(n - 1);
        std::size_t a = 0;
        for (std::size_t p = 0; p < n; ++p) {
            if (p == j) continue;
            std::size_t b = 0;
            for (std::size_t r = 0; r < n; ++r) {
                if (r == j) continue;
                hff(a, b++) = h(p, r);
            }
            rhs[a++] = -delta_j * h(p, j);
        }
        if (!cholesky(hff))
            throw SingularHessianError(
                "free-entry normal equations are singular; rerun with nonzero damping");
        cholesky_solve(hff, rhs);
        std::size_t c = 0;
        for (std::size_t p = 0; p < n; ++p)
            if (p != j) delta[p] = rhs[c++];
    }

    double quad = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        if (delta[a] == 0.0) continue;
        for (std::size_t b = 0; b < n; ++b) quad += delta[a] * h(a, b) * delta[b];
    }
    return 0.5 * quad;
}

Matrix heatmap_grid(const SensitivityMap& s, std::size_t pool) {
    if (pool == 0) throw std::invalid_argument("heatmap: pool must be >= 1");
    const std::size_t out_rows = (s.s.rows + pool - 1) / pool;
    const std::size_t out_cols = (s.s.cols + pool - 1) / pool;
    Matrix grid(out_rows, out_cols);
    for (std::size_t i = 0; i < out_rows; ++i)
        for (std::size_t j = 0; j < out_cols; ++j) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t a = i * pool; a < std::min(s.s.rows, (i + 1) * pool); ++a)
                for (std::size_t b = j * pool; b < std::min(s.s.cols, (j + 1) * pool); ++b)
                    best = std::max(best, std::log(s.s(a, b) + kLogOffset));
            grid(i, j) = best;
        }
    return grid;
}

void write_heatmap_csv(const Matrix& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open heatmap csv: " + path);
    out << "row,col,value\n";
    out.precision(10);
    for (std::size_t i = 0; i < grid.rows; ++i)
        for (std::size_t j = 0; j < grid.cols; ++j)
            out << i << ',' << j << ',' << grid(i, j) << "\n";
    if (!out) throw std::runtime_error("heatmap csv write failed: " + path);
}

void write_heatmap_pgm(const Matrix& grid, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open heatmap pgm: " + path);
    double lo = grid.data[0], hi = grid.data[0];
    for (double v : grid.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    out << "P5\n" << grid.cols << " " << grid.rows << "\n255\n";
    const double span = hi - lo;
    for (double v : grid.data) {
        const double norm = span > 0.0 ? (v - lo) / span : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(norm * 255.0))));
    }
    if (!out) throw std::runtime_error("heatmap pgm write failed: " + path);
}

DemocratizationStats democratization_stats(const SensitivityMap& s) {
    DemocratizationStats st;
    const std::size_t n = s.s.size();
    if (n == 0) throw std::invalid_argument("democratization_stats: empty map");
    st.entries = n;

    double mean = 0.0;
    std::vector<double> logs(n);
    for (std::size_t k = 0; k < n; ++k) {
        logs[k] = std::log(s.s.data[k] + kLogOffset);
        mean += logs[k];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : logs) var += (v - mean) * (v - mean);
    st.log_variance = var / static_cast<double>(n);

    std::vector<double> sorted(s.s.data);
    for (double& v : sorted) v += kLogOffset;
    std::sort(sorted.begin(), sorted.end());
    const double q1 = sorted[(n - 1) / 4];
    const double q3 = sorted[(3 * (n - 1)) / 4];
    st.interquartile_ratio = q3 / q1;

    const std::size_t top = std::max<std::size_t>(1, (n + 99) / 100);
    double total = 0.0, top_mass = 0.0;
    for (double v : sorted) total += v;
    for (std::size_t k = n - top; k < n; ++k) top_mass += sorted[k];
    st.top_share = total > 0.0 ? top_mass / total : 0.0;
    return st;
}

DownProjectionCalibration collect_down_calibration(Model& model,
                                                   const std::vector<std::uint8_t>& corpus,
                                                   std::size_t layer, std::size_t seq_len,
                                                   std::size_t max_tokens, std::uint64_t seed) {
    if (layer >= model.blocks.size())
        throw std::invalid_argument("calibration: layer index out of range");
    if (model.frozen())
        throw std::invalid_argument("calibration requires a training-mode model (latent weights)");
    auto& ffn = model.blocks[layer].ffn;
    if (model.cfg.n_branches == 0)
        throw std::invalid_argument("calibration: the analyzed block has no 8-bit branch");
    if (corpus.size() < seq_len + 2)
        throw std::invalid_argument("calibration: corpus shorter than one window");

    layers::FfnTap tap;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dist(0, corpus.size() - seq_len - 1);
    std::size_t collected = 0;
    while (collected < max_tokens) {
        const std::size_t off = dist(rng);
        std::vector<std::uint8_t> window(corpus.begin() + off, corpus.begin() + off + seq_len);
        model.forward(window, seq_len, static_cast<long>(layer), &tap);
        collected += seq_len;
    }

    DownProjectionCalibration out;
    out.bit_weights = quant::dequantize_weight(quant::binarize(ffn.bit_down.weight.value));
    {
        const std::size_t h1 = ffn.bit_down.in_features;
        out.bit_cal.x = Matrix(h1, tap.bit_hidden.size());
        for (std::size_t c = 0; c < tap.bit_hidden.size(); ++c)
            for (std::size_t rix = 0; rix < h1; ++rix)
                out.bit_cal.x(rix, c) = tap.bit_hidden[c][rix];
    }

    std::size_t best = 0;
    for (std::size_t k = 1; k < tap.hp_hidden.size(); ++k)
        if (tap.hp_hidden[k].size() > tap.hp_hidden[best].size()) best = k;
    if (tap.hp_hidden.empty() || tap.hp_hidden[best].empty())
        throw std::runtime_error("calibration: no tokens were routed to any 8-bit branch");
    out.branch = best;

    const quant::Int8Tensor qw = quant::absmax_quantize_weights(ffn.hp[best].down.weight.value);
    out.hp_weights = quant::dequantize_activation(qw);
    {
        const std::size_t r = ffn.hp[best].down.in_features;
        const auto& rows = tap.hp_hidden[best];
        out.hp_cal.x = Matrix(r, rows.size());
        for (std::size_t c = 0; c < rows.size(); ++c)
            for (std::size_t rix = 0; rix < r; ++rix) out.hp_cal.x(rix, c) = rows[c][rix];
    }
    return out;
}

}  // namespace pquant::sens

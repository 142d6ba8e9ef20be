#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pquant/matrix.hpp"
#include "pquant/model.hpp"

namespace pquant::sens {

struct SingularHessianError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Calibration inputs: columns are input vectors (in_features x n_samples).
struct CalibrationSet {
    Matrix x;

    std::size_t in_features() const { return x.rows; }
    std::size_t n_samples() const { return x.cols; }
};

struct HessianInverse {
    Matrix h_inv;        // in_features x in_features, symmetric positive definite
    double damping = 0;  // relative diagonal damping used during inversion
};

/// Per-weight sensitivities, same shape as the analyzed weight matrix.
struct SensitivityMap {
    Matrix s;
};

/// The perturbation applied to one weight; the democratization probe zeroes it.
using QuantRule = std::function<double(double)>;
inline double zero_probe(double) { return 0.0; }

/// H = X X^T + damping * mean(diag) * I, inverted via Cholesky and
/// symmetrized. Throws SingularHessianError when H is not positive definite
/// (use nonzero damping).
HessianInverse build_hessian_inverse(const CalibrationSet& cal, double damping);

/// s_ij = (w_ij - q(w_ij))^2 / (2 [H^-1]_jj); the OBS closed form with the
/// diagonal reading of the inverse Hessian.
SensitivityMap sensitivity_closed_form(const Matrix& w, const HessianInverse& hinv,
                                       const QuantRule& q = zero_probe);

/// Direct solve of the constrained least-squares problem: fix w'_ij = q(w_ij),
/// optimize every other entry of row i, return half the minimal squared
/// distortion (the same 1/2 normalization as the closed form). Oracle use
/// only: cost O(in_features^3) per weight.
double sensitivity_bruteforce(const Matrix& w, const CalibrationSet& cal, std::size_t i,
                              std::size_t j, const QuantRule& q = zero_probe,
                              double damping = 0.0);

/// log(s + 1e-12), max-pooled in pool x pool blocks (partial blocks at edges).
Matrix heatmap_grid(const SensitivityMap& s, std::size_t pool);

void write_heatmap_csv(const Matrix& grid, const std::string& path);

/// Binary P5 graymap, min..max normalized to 0..255 (constant grid -> 0).
void write_heatmap_pgm(const Matrix& grid, const std::string& path);

struct DemocratizationStats {
    double log_variance = 0.0;        // variance of log(s + offset)
    double interquartile_ratio = 0.0; // Q3/Q1 of s + offset
    double top_share = 0.0;           // mass held by the top 1% of entries
    std::size_t entries = 0;
};

DemocratizationStats democratization_stats(const SensitivityMap& s);

/// Calibration harvest hook: runs the model over corpus windows and records
/// the inputs of both down projections in one FFN block (the post-activation
/// hidden states). The analyzed 8-bit branch is the most-utilized one.
struct DownProjectionCalibration {
    Matrix bit_weights;       // dequantized 1-bit down weights
    CalibrationSet bit_cal;
    Matrix hp_weights;        // dequantized INT8 down weights of the analyzed branch
    CalibrationSet hp_cal;
    std::size_t branch = 0;
};

DownProjectionCalibration collect_down_calibration(Model& model,
                                                   const std::vector<std::uint8_t>& corpus,
                                                   std::size_t layer, std::size_t seq_len,
                                                   std::size_t max_tokens, std::uint64_t seed);

}  // namespace pquant::sens

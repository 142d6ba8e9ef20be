#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pquant/matrix.hpp"

namespace testutil {

inline pquant::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                                    double scale = 1.0) {
    pquant::Matrix m(rows, cols);
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (double& v : m.data) v = dist(rng);
    return m;
}

inline std::vector<std::int8_t> random_signs(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::int8_t> s(n);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : s) v = coin(rng) ? +1 : -1;
    return s;
}

inline std::vector<std::int8_t> random_int8(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::int8_t> a(n);
    std::uniform_int_distribution<int> dist(-128, 127);
    for (auto& v : a) v = static_cast<std::int8_t>(dist(rng));
    return a;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-12) {
    const double diff = std::fabs(a - b);
    return diff <= abs_floor + rel * std::max(std::fabs(a), std::fabs(b));
}

inline double max_rel_diff(const pquant::Matrix& a, const pquant::Matrix& b,
                           double abs_floor = 1e-12) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double denom =
            std::max({std::fabs(a.data[k]), std::fabs(b.data[k]), abs_floor});
        worst = std::max(worst, std::fabs(a.data[k] - b.data[k]) / denom);
    }
    return worst;
}

/// Synthetic character corpus with learnable structure: a seeded second-order
/// Markov chain over a small alphabet emitting word-like bursts. Any model
/// that picks up bigram statistics beats its unigram entropy.
inline std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
    static const std::string words[] = {
        "the",  "quant",  "model", "branch", "weight", "scale",  "token", "route",
        "bit",  "packed", "layer", "train",  "loss",   "expert", "gate",  "norm",
        "sign", "table",  "group", "linear", "step",   "decay",  "phase", "ratio",
    };
    std::mt19937_64 rng(seed);
    std::discrete_distribution<int> pick({9, 7, 6, 6, 5, 5, 5, 4, 4, 4, 3, 3,
                                          3, 3, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1});
    std::bernoulli_distribution newline(0.12);
    std::vector<std::uint8_t> out;
    out.reserve(bytes + 16);
    while (out.size() < bytes) {
        const std::string& w = words[pick(rng)];
        out.insert(out.end(), w.begin(), w.end());
        out.push_back(newline(rng) ? '\n' : ' ');
    }
    out.resize(bytes);
    return out;
}

}  // namespace testutil

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pquant/kernels.hpp"
#include "testutil.hpp"

using namespace pquant;
using namespace pquant::kernels;

namespace {

quant::BinaryMatrix from_signs(std::size_t rows, std::size_t cols,
                               const std::vector<std::int8_t>& signs, double lambda = 1.0) {
    quant::BinaryMatrix b;
    b.rows = rows;
    b.cols = cols;
    b.lambda = lambda;
    b.bits = quant::pack_bits(signs);
    return b;
}

quant::Int8Tensor row_tensor(const std::vector<std::int8_t>& vals) {
    quant::Int8Tensor t;
    t.rows = 1;
    t.cols = vals.size();
    t.values = vals;
    t.gamma = {1.0};
    return t;
}

}  // namespace

TEST_CASE("gemv_w1a8_ref: identity signs give the row sum") {
    auto w = from_signs(1, 4, {+1, +1, +1, +1});
    std::vector<std::int8_t> a{1, 2, 3, 4};
    auto out = gemv_w1a8_ref(w, a);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == 10);
}

TEST_CASE("gemv_w1a8_ref: alternating signs") {
    auto w = from_signs(1, 4, {+1, -1, +1, -1});
    std::vector<std::int8_t> a{1, 2, 3, 4};
    CHECK(gemv_w1a8_ref(w, a)[0] == -2);
}

TEST_CASE("gemv_w1a8_ref matches a float dot-product oracle") {
    std::mt19937_64 rng(21);
    auto signs = testutil::random_signs(64 * 64, rng);
    auto w = from_signs(64, 64, signs);
    auto a = testutil::random_int8(64, rng);
    auto out = gemv_w1a8_ref(w, a);
    for (std::size_t i = 0; i < 64; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 64; ++j)
            acc += static_cast<double>(signs[i * 64 + j]) * static_cast<double>(a[j]);
        CHECK(static_cast<double>(out[i]) == acc);
    }
}

TEST_CASE("gemv_w1a8_ref rejects dimension mismatch") {
    auto w = from_signs(1, 4, {+1, +1, +1, +1});
    std::vector<std::int8_t> a{1, 2, 3};
    CHECK_THROWS_AS(gemv_w1a8_ref(w, a), std::invalid_argument);
}

TEST_CASE("build_lut: enumerated example group") {
    std::vector<std::int8_t> a{1, 0, 0, 0};
    LookupTable lut = build_lut(a);
    REQUIRE(lut.groups == 1);
    CHECK(lut.entry(0, 0b0001) == 1);
    CHECK(lut.entry(0, 0b0000) == -1);
    CHECK(lut.entry(0, 0b1110) == -1);
}

TEST_CASE("build_lut: zero group gives all-zero entries") {
    std::vector<std::int8_t> a{0, 0, 0, 0};
    LookupTable lut = build_lut(a);
    for (unsigned p = 0; p < 16; ++p) CHECK(lut.entry(0, p) == 0);
}

TEST_CASE("build_lut: sign-flip antisymmetry on random groups") {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 100; ++trial) {
        auto a = testutil::random_int8(4 + trial % 9, rng);  // exercises padding too
        LookupTable lut = build_lut(a);
        for (std::size_t g = 0; g < lut.groups; ++g)
            for (unsigned p = 0; p < 16; ++p)
                CHECK(lut.entry(g, p) == -lut.entry(g, 15 - p));
    }
}

TEST_CASE("gemv_w1a8_lut equals the reference on the worked examples") {
    auto w = from_signs(1, 4, {+1, -1, +1, -1});
    std::vector<std::int8_t> a{1, 2, 3, 4};
    auto lut = build_lut(a);
    CHECK(gemv_w1a8_lut(w, lut) == gemv_w1a8_ref(w, a));
    CHECK(gemv_w1a8_lut(w, lut)[0] == -2);

    std::mt19937_64 rng(29);
    auto ones = from_signs(3, 5, std::vector<std::int8_t>(15, +1));
    auto a5 = testutil::random_int8(5, rng);
    CHECK(gemv_w1a8_lut(ones, build_lut(a5)) == gemv_w1a8_ref(ones, a5));
}

TEST_CASE("gemv_w1a8_lut: randomized bit-exact equivalence with the reference") {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::size_t> rdist(1, 128), cdist(1, 512);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t rows = rdist(rng), cols = cdist(rng);
        auto signs = testutil::random_signs(rows * cols, rng);
        auto w = from_signs(rows, cols, signs);
        auto a = testutil::random_int8(cols, rng);
        CHECK(gemv_w1a8_lut(w, build_lut(a)) == gemv_w1a8_ref(w, a));
    }
}

TEST_CASE("gemv_w1a8_lut rejects group-count mismatch") {
    auto w = from_signs(1, 8, std::vector<std::int8_t>(8, +1));
    auto lut = build_lut(std::vector<std::int8_t>{1, 2, 3, 4});
    CHECK_THROWS_AS(gemv_w1a8_lut(w, lut), std::invalid_argument);
}

TEST_CASE("gemm_w1a8_ref agrees with per-row gemv") {
    std::mt19937_64 rng(24);
    auto signs = testutil::random_signs(12 * 30, rng);
    auto w = from_signs(12, 30, signs);
    quant::Int8Tensor a;
    a.rows = 5;
    a.cols = 30;
    a.values = testutil::random_int8(5 * 30, rng);
    a.gamma.assign(5, 1.0);
    auto out = gemm_w1a8_ref(w, a);
    for (std::size_t t = 0; t < 5; ++t) {
        auto ref = gemv_w1a8_ref(w, {a.row(t), a.cols});
        for (std::size_t i = 0; i < 12; ++i) CHECK(out.at(t, i) == ref[i]);
    }
}

TEST_CASE("gemm_int8: scalar cases") {
    quant::Int8Tensor w = row_tensor({3});
    quant::Int8Tensor a = row_tensor({-5});
    auto out = gemm_int8(w, a);
    CHECK(out.at(0, 0) == -15);
}

TEST_CASE("gemm_int8: near-identity recovers the input after rescale") {
    const std::size_t n = 8;
    quant::Int8Tensor w;
    w.rows = w.cols = n;
    w.values.assign(n * n, 0);
    w.gamma.assign(n, 127.0);
    for (std::size_t i = 0; i < n; ++i) w.values[i * n + i] = 127;

    std::mt19937_64 rng(25);
    quant::Int8Tensor a;
    a.rows = 1;
    a.cols = n;
    a.values = testutil::random_int8(n, rng);
    a.gamma = {1.0};

    auto out = gemm_int8(w, a);
    for (std::size_t j = 0; j < n; ++j) {
        const double rescaled = out.at(0, j) / (w.gamma[j] * a.gamma[0]);
        CHECK(rescaled == doctest::Approx(static_cast<double>(a.values[j])).epsilon(1e-12));
    }
}

TEST_CASE("gemm_int8 matches a float oracle after rescale") {
    std::mt19937_64 rng(26);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix wf = testutil::random_matrix(6, 17, rng);
        Matrix af = testutil::random_matrix(4, 17, rng);
        auto qw = quant::absmax_quantize(wf);
        auto qa = quant::absmax_quantize(af);
        auto out = gemm_int8(qw, qa);
        Matrix wd = quant::dequantize_activation(qw);
        Matrix ad = quant::dequantize_activation(qa);
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t o = 0; o < 6; ++o) {
                double acc = 0.0;
                for (std::size_t j = 0; j < 17; ++j) acc += wd(o, j) * ad(t, j);
                const double got = out.at(t, o) / (qw.gamma[o] * qa.gamma[t]);
                CHECK(testutil::close_rel(got, acc, 1e-6));
            }
    }
}

TEST_CASE("accumulators stay within the documented bound") {
    std::mt19937_64 rng(27);
    const std::size_t cols = 512;
    auto w = from_signs(4, cols, testutil::random_signs(4 * cols, rng));
    auto a = testutil::random_int8(cols, rng);
    for (auto v : gemv_w1a8_ref(w, a))
        CHECK(std::llabs(v) <= static_cast<long long>(cols) * 128);
}

TEST_CASE("fused_ffn_first_gemm equals the standalone kernels") {
    std::mt19937_64 rng(28);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t d = 1 + static_cast<std::size_t>(rng() % 64);
        const std::size_t h1 = 1 + static_cast<std::size_t>(rng() % 32);
        const std::size_t r = 1 + static_cast<std::size_t>(rng() % 16);
        auto w1 = from_signs(h1, d, testutil::random_signs(h1 * d, rng));
        quant::Int8Tensor w8;
        w8.rows = r;
        w8.cols = d;
        w8.values = testutil::random_int8(r * d, rng);
        w8.gamma.assign(r, 1.0);
        auto a = testutil::random_int8(d, rng);

        auto [bit_out, hp_out] = fused_ffn_first_gemm(w1, w8, a);
        CHECK(bit_out == gemv_w1a8_ref(w1, a));
        quant::Int8Tensor arow = row_tensor(a);
        auto ref8 = gemm_int8(w8, arow);
        for (std::size_t i = 0; i < r; ++i) CHECK(hp_out[i] == ref8.at(0, i));
    }

    // Zero activations zero both branches.
    auto w1 = from_signs(3, 8, testutil::random_signs(24, rng));
    quant::Int8Tensor w8;
    w8.rows = 2;
    w8.cols = 8;
    w8.values = testutil::random_int8(16, rng);
    w8.gamma.assign(2, 1.0);
    std::vector<std::int8_t> zeros(8, 0);
    auto [b0, h0] = fused_ffn_first_gemm(w1, w8, zeros);
    for (auto v : b0) CHECK(v == 0);
    for (auto v : h0) CHECK(v == 0);
}

#include "pquant/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace pquant::layers {

Matrix silu(const Matrix& x) {
    Matrix y(x.rows, x.cols);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = x.data[k];
        y.data[k] = v / (1.0 + std::exp(-v));
    }
    return y;
}

Matrix silu_backward(const Matrix& x, const Matrix& dy) {
    Matrix dx(x.rows, x.cols);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = x.data[k];
        const double s = 1.0 / (1.0 + std::exp(-v));
        dx.data[k] = dy.data[k] * s * (1.0 + v * (1.0 - s));
    }
    return dx;
}

Matrix rmsnorm(const Matrix& x, const Matrix& gain, double eps) {
    if (x.cols != gain.size())
        throw std::invalid_argument("rmsnorm: gain length must match columns");
    Matrix y(x.rows, x.cols);
    for (std::size_t t = 0; t < x.rows; ++t) {
        double ss = 0.0;
        const double* xr = x.row(t);
        for (std::size_t j = 0; j < x.cols; ++j) ss += xr[j] * xr[j];
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols) + eps);
        double* yr = y.row(t);
        for (std::size_t j = 0; j < x.cols; ++j) yr[j] = gain.data[j] * xr[j] * inv;
    }
    return y;
}

void softmax_row(double* p, std::size_t n) {
    double m = p[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, p[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(p[j] - m);
        sum += p[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

// -- RmsNorm ---------------------------------------------------------------

Matrix RmsNorm::forward(const Matrix& x) {
    x_cache = x;
    rms_cache.resize(x.rows);
    Matrix y(x.rows, x.cols);
    for (std::size_t t = 0; t < x.rows; ++t) {
        double ss = 0.0;
        const double* xr = x.row(t);
        for (std::size_t j = 0; j < x.cols; ++j) ss += xr[j] * xr[j];
        const double r = std::sqrt(ss / static_cast<double>(x.cols) + eps);
        rms_cache[t] = r;
        const double inv = 1.0 / r;
        double* yr = y.row(t);
        for (std::size_t j = 0; j < x.cols; ++j) yr[j] = gain.value.data[j] * xr[j] * inv;
    }
    return y;
}

Matrix RmsNorm::backward(const Matrix& dy) {
    const std::size_t d = x_cache.cols;
    Matrix dx(dy.rows, d);
    for (std::size_t t = 0; t < dy.rows; ++t) {
        const double r = rms_cache[t];
        const double* xr = x_cache.row(t);
        const double* dyr = dy.row(t);
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double du = dyr[j] * gain.value.data[j];
            dot += du * xr[j];
            dx(t, j) = du / r;
            gain.grad.data[j] += dyr[j] * xr[j] / r;
        }
        const double corr = dot / (static_cast<double>(d) * r * r * r);
        for (std::size_t j = 0; j < d; ++j) dx(t, j) -= xr[j] * corr;
    }
    return dx;
}

// -- BitLinear ---------------------------------------------------------------

Matrix BitLinear::forward(const Matrix& x, double path_const) {
    if (x.cols != in_features)
        throw std::invalid_argument("BitLinear: input width mismatch");

    if (mode == Mode::inference) {
        const quant::Int8Tensor qx = quant::absmax_quantize(x);
        Matrix y(x.rows, out_features);
        for (std::size_t t = 0; t < x.rows; ++t) {
            const kernels::LookupTable lut =
                kernels::build_lut({qx.row(t), qx.cols});
            const kernels::AccumulatorVector acc = kernels::gemv_w1a8_lut(packed, lut);
            const double c = (path_const * fused_scale) / qx.gamma[t];
            for (std::size_t o = 0; o < out_features; ++o)
                y(t, o) = c * acc[o];
        }
        return y;
    }

    qx_cache = quant::absmax_quantize(x);
    const quant::BinaryMatrix bw = quant::binarize(weight.value);
    signs_cache = quant::unpack_signs(bw);
    acc_cache = kernels::gemm_w1a8_ref(bw, qx_cache);
    lambda_cache = bw.lambda;
    path_cache = path_const;

    const double c_eff = path_const * bw.lambda;
    Matrix y(x.rows, out_features);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double c = c_eff / qx_cache.gamma[t];
        for (std::size_t o = 0; o < out_features; ++o)
            y(t, o) = c * acc_cache.at(t, o);
    }
    return y;
}

BitLinearGrad BitLinear::backward(const Matrix& dy) {
    if (mode != Mode::training)
        throw std::logic_error("BitLinear: backward in inference mode");
    const std::size_t tokens = dy.rows;

    // Inputs: straight-through, using the quantized weights from the forward.
    const double c_eff = path_cache * lambda_cache;
    Matrix dx(tokens, in_features);
#pragma omp parallel for schedule(static)
    for (long long tt = 0; tt < static_cast<long long>(tokens); ++tt) {
        const std::size_t t = static_cast<std::size_t>(tt);
        double* dxr = dx.row(t);
        for (std::size_t o = 0; o < out_features; ++o) {
            const double coef = dy(t, o);
            if (coef == 0.0) continue;
            const std::int8_t* sv = signs_cache.data() + o * in_features;
            for (std::size_t j = 0; j < in_features; ++j)
                dxr[j] += sv[j] > 0 ? coef : -coef;
        }
        for (std::size_t j = 0; j < in_features; ++j) dxr[j] *= c_eff;
    }

    // Latent weights: quantizer treated as the identity map, evaluated at the
    // dequantized activations actually used in the forward.
    const Matrix xhat = quant::dequantize_activation(qx_cache);
    const Matrix wg = matmul_tn(dy, xhat);
    for (std::size_t k = 0; k < wg.size(); ++k)
        weight.grad.data[k] += path_cache * wg.data[k];

    // Path constant (branch scalar owned by the caller).
    double dpath = 0.0;
    for (std::size_t t = 0; t < tokens; ++t) {
        const double s = lambda_cache / qx_cache.gamma[t];
        for (std::size_t o = 0; o < out_features; ++o)
            dpath += dy(t, o) * s * acc_cache.at(t, o);
    }
    return {std::move(dx), dpath};
}

void BitLinear::freeze(double path_const) {
    if (mode == Mode::inference) return;
    packed = quant::binarize(weight.value);
    fused_scale = path_const * packed.lambda;
    weight.value = Matrix();
    weight.grad = Matrix();
    qx_cache = {};
    signs_cache.clear();
    acc_cache = {};
    mode = Mode::inference;
}

// -- Int8Linear ----------------------------------------------------------------

Matrix Int8Linear::forward(const Matrix& x) {
    if (x.cols != in_features)
        throw std::invalid_argument("Int8Linear: input width mismatch");
    const quant::Int8Tensor qx = quant::absmax_quantize(x);
    const quant::Int8Tensor& qw =
        mode == Mode::inference ? packed : (qw_cache = quant::absmax_quantize_weights(weight.value));
    const kernels::AccumulatorMatrix acc = kernels::gemm_int8(qw, qx);

    Matrix y(x.rows, out_features);
    for (std::size_t t = 0; t < x.rows; ++t)
        for (std::size_t o = 0; o < out_features; ++o)
            y(t, o) = acc.at(t, o) / (qw.gamma[o] * qx.gamma[t]);

    if (mode == Mode::training) {
        qx_cache = qx;
        acc_cache = acc;
    }
    return y;
}

Matrix Int8Linear::backward(const Matrix& dy) {
    if (mode != Mode::training)
        throw std::logic_error("Int8Linear: backward in inference mode");

    Matrix what(out_features, in_features);
    for (std::size_t o = 0; o < out_features; ++o) {
        const double inv = 1.0 / qw_cache.gamma[o];
        for (std::size_t j = 0; j < in_features; ++j)
            what(o, j) = qw_cache.at(o, j) * inv;
    }
    Matrix dx = matmul_nn(dy, what);

    const Matrix xhat = quant::dequantize_activation(qx_cache);
    const Matrix wg = matmul_tn(dy, xhat);
    for (std::size_t k = 0; k < wg.size(); ++k) weight.grad.data[k] += wg.data[k];
    return dx;
}

void Int8Linear::freeze() {
    if (mode == Mode::inference) return;
    packed = quant::absmax_quantize_weights(weight.value);
    weight.value = Matrix();
    weight.grad = Matrix();
    qx_cache = {};
    qw_cache = {};
    acc_cache = {};
    mode = Mode::inference;
}

// -- routing -------------------------------------------------------------------

std::pair<std::size_t, double> router_select(const Matrix& router, const double* x_token) {
    const std::size_t n = router.rows;
    std::vector<double> p(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double* rr = router.row(k);
        double acc = 0.0;
        for (std::size_t j = 0; j < router.cols; ++j) acc += rr[j] * x_token[j];
        p[k] = acc;
    }
    softmax_row(p.data(), n);
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k)
        if (p[k] > p[best]) best = k;
    return {best, p[best]};
}

// -- DecoupledLinear -------------------------------------------------------------

DecoupledLinear::DecoupledLinear(const std::string& prefix, std::size_t d,
                                 std::size_t d_ffn_nominal, std::size_t r_width, std::size_t n)
    : d_model(d),
      r(n == 0 ? 0 : r_width),
      n_branches(n),
      bit_up(prefix + ".bit_up", n == 0 ? d_ffn_nominal : d_ffn_nominal - r_width, d),
      bit_down(prefix + ".bit_down", d, n == 0 ? d_ffn_nominal : d_ffn_nominal - r_width),
      router(prefix + ".router", n, n == 0 ? 0 : d),
      alpha(prefix + ".alpha", 1, 1, false),
      beta(prefix + ".beta", 1, 1, false) {
    if (n > 0 && r_width >= d_ffn_nominal)
        throw std::invalid_argument("DecoupledLinear: r must be below the nominal FFN width");
    for (std::size_t k = 0; k < n; ++k) {
        const std::string b = prefix + ".hp" + std::to_string(k);
        hp.push_back(HpBranch{Int8Linear(b + ".up", r, d), Int8Linear(b + ".down", d, r)});
    }
}

Matrix DecoupledLinear::forward(const Matrix& x, FfnTap* tap) {
    if (x.cols != d_model)
        throw std::invalid_argument("DecoupledLinear: input width mismatch");
    const std::size_t tokens = x.rows;
    const bool inference = bit_up.mode == Mode::inference;

    if (inference && n_branches > 0) return forward_packed(x);

    // 1-bit branch (the shared expert).
    silu_in_bit_ = bit_up.forward(x, 1.0);
    Matrix a_bit = silu(silu_in_bit_);
    if (tap)
        for (std::size_t t = 0; t < tokens; ++t)
            tap->bit_hidden.emplace_back(a_bit.row(t), a_bit.row(t) + a_bit.cols);
    if (n_branches == 0) return bit_down.forward(a_bit, 1.0);

    const double beta_v = beta.value.data[0];
    Matrix y = bit_down.forward(a_bit, beta_v);

    // Top-1 routing over the same normalized input.
    const std::size_t n = n_branches;
    probs_ = matmul_nt(x, router.value);
    token_branch_.assign(tokens, 0);
    token_gate_.assign(tokens, 1.0);
    branch_tokens_.assign(n, {});
    branch_counts_.assign(n, 0);
    for (std::size_t t = 0; t < tokens; ++t) {
        softmax_row(probs_.row(t), n);
        std::size_t best = 0;
        for (std::size_t k = 1; k < n; ++k)
            if (probs_(t, k) > probs_(t, best)) best = k;
        token_branch_[t] = best;
        token_gate_[t] = n > 1 ? probs_(t, best) : 1.0;
        branch_tokens_[best].push_back(t);
        branch_counts_[best]++;
    }

    if (tap && tap->hp_hidden.size() < n) tap->hp_hidden.resize(n);

    hp_out_ = Matrix(tokens, d_model);
    silu_in_hp_.assign(n, Matrix());
    for (std::size_t k = 0; k < n; ++k) {
        const auto& list = branch_tokens_[k];
        if (list.empty()) continue;
        Matrix xk(list.size(), d_model);
        for (std::size_t i = 0; i < list.size(); ++i)
            std::copy(x.row(list[i]), x.row(list[i]) + d_model, xk.row(i));
        silu_in_hp_[k] = hp[k].up.forward(xk);
        Matrix ak = silu(silu_in_hp_[k]);
        if (tap)
            for (std::size_t i = 0; i < list.size(); ++i)
                tap->hp_hidden[k].emplace_back(ak.row(i), ak.row(i) + ak.cols);
        Matrix ok = hp[k].down.forward(ak);
        for (std::size_t i = 0; i < list.size(); ++i)
            std::copy(ok.row(i), ok.row(i) + d_model, hp_out_.row(list[i]));
    }

    const double alpha_v = alpha.value.data[0];
    for (std::size_t t = 0; t < tokens; ++t) {
        const double m = alpha_v * token_gate_[t];
        double* yr = y.row(t);
        const double* hr = hp_out_.row(t);
        for (std::size_t j = 0; j < d_model; ++j) yr[j] += m * hr[j];
    }
    x_cache_ = x;
    return y;
}

Matrix DecoupledLinear::forward_packed(const Matrix& x) {
    const std::size_t tokens = x.rows;
    const std::size_t n = n_branches;
    const quant::Int8Tensor qx = quant::absmax_quantize(x);

    branch_counts_.assign(n, 0);
    Matrix y(tokens, d_model);
    const std::size_t h1 = bit_up.out_features;
    for (std::size_t t = 0; t < tokens; ++t) {
        auto [k, gate] = router_select(router.value, x.row(t));
        branch_counts_[k]++;
        const double g = n > 1 ? gate : 1.0;

        // Both up projections from one read of the quantized input row.
        auto [acc_bit, acc_hp] =
            kernels::fused_ffn_first_gemm(bit_up.packed, hp[k].up.packed, {qx.row(t), qx.cols});

        Matrix h_bit(1, h1);
        {
            const double c = bit_up.fused_scale / qx.gamma[t];
            for (std::size_t o = 0; o < h1; ++o) h_bit(0, o) = c * acc_bit[o];
        }
        Matrix h_hp(1, r);
        for (std::size_t o = 0; o < r; ++o)
            h_hp(0, o) = acc_hp[o] / (hp[k].up.packed.gamma[o] * qx.gamma[t]);

        const Matrix a_bit = silu(h_bit);
        const Matrix a_hp = silu(h_hp);

        const Matrix y_bit = bit_down.forward(a_bit);  // fused scale includes beta
        const Matrix y_hp = hp[k].down.forward(a_hp);

        const double m = fused_alpha_ * g;
        double* yr = y.row(t);
        for (std::size_t j = 0; j < d_model; ++j) yr[j] = y_bit(0, j) + m * y_hp(0, j);
    }
    return y;
}

Matrix DecoupledLinear::backward(const Matrix& dy) {
    // 1-bit branch.
    BitLinearGrad down_grad = bit_down.backward(dy);
    if (n_branches > 0) beta.grad.data[0] += down_grad.dpath;
    Matrix dh_bit = silu_backward(silu_in_bit_, down_grad.dx);
    Matrix dx = bit_up.backward(dh_bit).dx;
    if (n_branches == 0) return dx;

    const std::size_t tokens = dy.rows;
    const std::size_t n = n_branches;
    const double alpha_v = alpha.value.data[0];

    // alpha and per-token gate gradients.
    std::vector<double> dgate(tokens, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
        const double* dyr = dy.row(t);
        const double* hr = hp_out_.row(t);
        double dot = 0.0;
        for (std::size_t j = 0; j < d_model; ++j) dot += dyr[j] * hr[j];
        alpha.grad.data[0] += token_gate_[t] * dot;
        dgate[t] = alpha_v * dot;
    }

    // Routed branches.
    for (std::size_t k = 0; k < n; ++k) {
        const auto& list = branch_tokens_[k];
        if (list.empty()) continue;
        Matrix dok(list.size(), d_model);
        for (std::size_t i = 0; i < list.size(); ++i) {
            const std::size_t t = list[i];
            const double m = alpha_v * token_gate_[t];
            const double* dyr = dy.row(t);
            double* dr = dok.row(i);
            for (std::size_t j = 0; j < d_model; ++j) dr[j] = m * dyr[j];
        }
        Matrix dak = hp[k].down.backward(dok);
        Matrix dhk = silu_backward(silu_in_hp_[k], dak);
        Matrix dxk = hp[k].up.backward(dhk);
        for (std::size_t i = 0; i < list.size(); ++i) {
            const std::size_t t = list[i];
            double* dxr = dx.row(t);
            const double* sr = dxk.row(i);
            for (std::size_t j = 0; j < d_model; ++j) dxr[j] += sr[j];
        }
    }

    // Router: gradient flows through the selected gate probability.
    if (n > 1) {
        Matrix dlogits(tokens, n);
        for (std::size_t t = 0; t < tokens; ++t) {
            const std::size_t sel = token_branch_[t];
            const double g = token_gate_[t];
            const double c = dgate[t] * g;
            for (std::size_t m = 0; m < n; ++m)
                dlogits(t, m) = c * ((m == sel ? 1.0 : 0.0) - probs_(t, m));
        }
        const Matrix rg = matmul_tn(dlogits, x_cache_);
        for (std::size_t k2 = 0; k2 < rg.size(); ++k2) router.grad.data[k2] += rg.data[k2];
        const Matrix dxr = matmul_nn(dlogits, router.value);
        for (std::size_t k2 = 0; k2 < dx.size(); ++k2) dx.data[k2] += dxr.data[k2];
    }
    return dx;
}

void DecoupledLinear::freeze() {
    bit_up.freeze(1.0);
    bit_down.freeze(n_branches == 0 ? 1.0 : beta.value.data[0]);
    if (n_branches > 0) {
        fused_alpha_ = alpha.value.data[0];
        for (auto& b : hp) {
            b.up.freeze();
            b.down.freeze();
        }
        alpha.value = Matrix();
        alpha.grad = Matrix();
        beta.value = Matrix();
        beta.grad = Matrix();
    }
}

void DecoupledLinear::visit(const ParamVisitor& v) {
    if (bit_up.mode == Mode::inference) return;
    if (n_branches > 0) {
        v(router);
        v(alpha);
        v(beta);
    }
    bit_up.visit(v);
    bit_down.visit(v);
    for (auto& b : hp) {
        b.up.visit(v);
        b.down.visit(v);
    }
}

// -- attention -------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, std::size_t d, std::size_t heads)
    : d_model(d),
      n_heads(heads),
      head_dim(d / heads),
      wq(prefix + ".wq", d, d),
      wk(prefix + ".wk", d, d),
      wv(prefix + ".wv", d, d),
      wo(prefix + ".wo", d, d) {
    if (d % heads != 0) throw std::invalid_argument("attention: heads must divide d_model");
}

Matrix attention_core(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t seq_len,
                      std::size_t n_heads, AttentionCache* cache) {
    if (q.rows % seq_len != 0)
        throw std::invalid_argument("attention: rows must be a multiple of seq_len");
    if (q.cols % n_heads != 0)
        throw std::invalid_argument("attention: heads must divide the feature width");
    const std::size_t batch = q.rows / seq_len;
    const std::size_t head_dim = q.cols / n_heads;

    std::vector<Matrix> probs(batch * n_heads, Matrix(seq_len, seq_len));
    Matrix ctx(q.rows, q.cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
#pragma omp parallel for schedule(static)
    for (long long bh = 0; bh < static_cast<long long>(batch * n_heads); ++bh) {
        const std::size_t b = static_cast<std::size_t>(bh) / n_heads;
        const std::size_t h = static_cast<std::size_t>(bh) % n_heads;
        Matrix& att = probs[static_cast<std::size_t>(bh)];
        for (std::size_t i = 0; i < seq_len; ++i) {
            const std::size_t ti = b * seq_len + i;
            const double* qr = q.row(ti) + h * head_dim;
            double* ar = att.row(i);
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kr = k.row(b * seq_len + j) + h * head_dim;
                double acc = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) acc += qr[c] * kr[c];
                ar[j] = acc * scale;
            }
            softmax_row(ar, i + 1);
            double* cr = ctx.row(ti) + h * head_dim;
            for (std::size_t j = 0; j <= i; ++j) {
                const double a = ar[j];
                const double* vr = v.row(b * seq_len + j) + h * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) cr[c] += a * vr[c];
            }
        }
    }
    if (cache) {
        cache->seq_len = seq_len;
        cache->n_heads = n_heads;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = std::move(probs);
    }
    return ctx;
}

void attention_core_backward(const AttentionCache& cache, const Matrix& dctx, Matrix& dq,
                             Matrix& dk, Matrix& dv) {
    const std::size_t seq_len = cache.seq_len;
    const std::size_t n_heads = cache.n_heads;
    const std::size_t head_dim = cache.q.cols / n_heads;
    const std::size_t batch = cache.q.rows / seq_len;

    dq = Matrix(cache.q.rows, cache.q.cols);
    dk = Matrix(cache.q.rows, cache.q.cols);
    dv = Matrix(cache.q.rows, cache.q.cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
#pragma omp parallel for schedule(static)
    for (long long bh = 0; bh < static_cast<long long>(batch * n_heads); ++bh) {
        const std::size_t b = static_cast<std::size_t>(bh) / n_heads;
        const std::size_t h = static_cast<std::size_t>(bh) % n_heads;
        const Matrix& att = cache.probs[static_cast<std::size_t>(bh)];
        std::vector<double> da(seq_len);
        for (std::size_t i = 0; i < seq_len; ++i) {
            const std::size_t ti = b * seq_len + i;
            const double* dcr = dctx.row(ti) + h * head_dim;
            const double* ar = att.row(i);
            double mix = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t tj = b * seq_len + j;
                const double* vr = cache.v.row(tj) + h * head_dim;
                double acc = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) acc += dcr[c] * vr[c];
                da[j] = acc;
                mix += ar[j] * acc;
                double* dvr = dv.row(tj) + h * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) dvr[c] += ar[j] * dcr[c];
            }
            const double* qr = cache.q.row(ti) + h * head_dim;
            double* dqr = dq.row(ti) + h * head_dim;
            for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t tj = b * seq_len + j;
                const double ds = ar[j] * (da[j] - mix) * scale;
                if (ds == 0.0) continue;
                const double* kr = cache.k.row(tj) + h * head_dim;
                double* dkr = dk.row(tj) + h * head_dim;
                for (std::size_t c = 0; c < head_dim; ++c) {
                    dqr[c] += ds * kr[c];
                    dkr[c] += ds * qr[c];
                }
            }
        }
    }
}

Matrix MultiHeadAttention::forward(const Matrix& x, std::size_t seq_len) {
    const Matrix q = wq.forward(x);
    const Matrix k = wk.forward(x);
    const Matrix v = wv.forward(x);
    const Matrix ctx = attention_core(q, k, v, seq_len, n_heads, &cache_);
    return wo.forward(ctx);
}

Matrix MultiHeadAttention::backward(const Matrix& dy) {
    Matrix dctx = wo.backward(dy).dx;
    Matrix dq, dk, dv;
    attention_core_backward(cache_, dctx, dq, dk, dv);

    Matrix dx = wq.backward(dq).dx;
    const Matrix dxk = wk.backward(dk).dx;
    const Matrix dxv = wv.backward(dv).dx;
    for (std::size_t k = 0; k < dx.size(); ++k) dx.data[k] += dxk.data[k] + dxv.data[k];
    return dx;
}

void MultiHeadAttention::freeze() {
    wq.freeze(1.0);
    wk.freeze(1.0);
    wv.freeze(1.0);
    wo.freeze(1.0);
}

void MultiHeadAttention::visit(const ParamVisitor& v) {
    wq.visit(v);
    wk.visit(v);
    wv.visit(v);
    wo.visit(v);
}

// -- block -------------------------------------------------------------------------

TransformerBlock::TransformerBlock(const std::string& prefix, std::size_t d_model,
                                   std::size_t n_heads, std::size_t d_ffn_nominal, std::size_t r,
                                   std::size_t n_branches)
    : norm1(prefix + ".norm1.gain", d_model),
      norm2(prefix + ".norm2.gain", d_model),
      attn(prefix + ".attn", d_model, n_heads),
      ffn(prefix + ".ffn", d_model, d_ffn_nominal, r, n_branches) {}

Matrix TransformerBlock::forward(const Matrix& x, std::size_t seq_len, FfnTap* tap) {
    Matrix xn1 = norm1.forward(x);
    Matrix a = attn.forward(xn1, seq_len);
    Matrix x1 = x;
    for (std::size_t k = 0; k < x1.size(); ++k) x1.data[k] += a.data[k];

    Matrix xn2 = norm2.forward(x1);
    Matrix f = ffn.forward(xn2, tap);
    for (std::size_t k = 0; k < x1.size(); ++k) f.data[k] += x1.data[k];
    return f;
}

Matrix TransformerBlock::backward(const Matrix& dy) {
    Matrix dxn2 = ffn.backward(dy);
    Matrix dx1 = norm2.backward(dxn2);
    for (std::size_t k = 0; k < dx1.size(); ++k) dx1.data[k] += dy.data[k];

    Matrix dxn1 = attn.backward(dx1);
    Matrix dx = norm1.backward(dxn1);
    for (std::size_t k = 0; k < dx.size(); ++k) dx.data[k] += dx1.data[k];
    return dx;
}

void TransformerBlock::freeze() {
    attn.freeze();
    ffn.freeze();
}

void TransformerBlock::visit(const ParamVisitor& v) {
    norm1.visit(v);
    attn.visit(v);
    norm2.visit(v);
    ffn.visit(v);
}

}  // namespace pquant::layers

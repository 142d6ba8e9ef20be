#include "pquant/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "pquant/kernels.hpp"
#include "pquant/serialize.hpp"

namespace pquant::infer {

namespace {

constexpr std::uint32_t kPackedVersion = 1;

void write_cfg(io::Writer& w, const ModelConfig& m) {
    w.u64(m.d_model);
    w.u64(m.d_ffn_nominal);
    w.u64(m.r);
    w.u64(m.n_branches);
    w.u64(m.n_layers);
    w.u64(m.n_heads);
    w.u64(m.vocab_size);
    w.u64(m.max_seq_len);
    w.u64(m.r_alignment);
    w.f64(m.alpha_init);
    w.f64(m.beta_init);
}

ModelConfig read_cfg(io::Reader& r) {
    ModelConfig m;
    m.d_model = r.u64();
    m.d_ffn_nominal = r.u64();
    m.r = r.u64();
    m.n_branches = r.u64();
    m.n_layers = r.u64();
    m.n_heads = r.u64();
    m.vocab_size = r.u64();
    m.max_seq_len = r.u64();
    m.r_alignment = r.u64();
    m.alpha_init = r.f64();
    m.beta_init = r.f64();
    return m;
}

void write_matrix(io::Writer& w, const Matrix& m) {
    w.u64(m.rows);
    w.u64(m.cols);
    w.f64_array(m.data);
}

Matrix read_matrix(io::Reader& r) {
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    return Matrix(rows, cols, r.f64_array(rows * cols));
}

void write_bit_tensor(io::Writer& w, const layers::BitLinear& l) {
    w.u64(l.packed.rows);
    w.u64(l.packed.cols);
    w.bytes(l.packed.bits.data(), l.packed.bits.size());
    w.f64(l.fused_scale);
}

void read_bit_tensor(io::Reader& r, layers::BitLinear& l) {
    l.packed.rows = r.u64();
    l.packed.cols = r.u64();
    if (l.packed.rows != l.out_features || l.packed.cols != l.in_features)
        throw std::runtime_error("packed model: 1-bit tensor shape mismatch");
    l.packed.bits.resize(l.packed.packed_size());
    r.bytes(l.packed.bits.data(), l.packed.bits.size());
    l.fused_scale = r.f64();
    l.weight.value = Matrix();
    l.weight.grad = Matrix();
    l.mode = layers::Mode::inference;
}

void write_int8_tensor(io::Writer& w, const layers::Int8Linear& l) {
    w.u64(l.packed.rows);
    w.u64(l.packed.cols);
    w.bytes(l.packed.values.data(), l.packed.values.size());
    // Per-row dequantization steps, stored as fp16 (they are fp16-rounded by
    // the quantizer, so this is lossless).
    for (double g : l.packed.gamma) w.u16(quant::fp16_encode(1.0 / g));
}

void read_int8_tensor(io::Reader& r, layers::Int8Linear& l) {
    l.packed.rows = r.u64();
    l.packed.cols = r.u64();
    if (l.packed.rows != l.out_features || l.packed.cols != l.in_features)
        throw std::runtime_error("packed model: INT8 tensor shape mismatch");
    l.packed.values.resize(l.packed.rows * l.packed.cols);
    r.bytes(l.packed.values.data(), l.packed.values.size());
    l.packed.gamma.resize(l.packed.rows);
    for (double& g : l.packed.gamma) {
        const double scale = quant::fp16_decode(r.u16());
        if (!(scale > 0.0)) throw std::runtime_error("packed model: non-positive INT8 scale");
        g = 1.0 / scale;
    }
    l.weight.value = Matrix();
    l.weight.grad = Matrix();
    l.mode = layers::Mode::inference;
}

}  // namespace

void export_packed(const Checkpoint& ckpt, const std::string& path) {
    Model model = model_from_checkpoint(ckpt);
    model.freeze();

    io::Writer w(path);
    w.bytes("PQTM", 4);
    w.u32(kPackedVersion);
    write_cfg(w, model.cfg);

    write_matrix(w, model.tok_emb.value);
    write_matrix(w, model.pos_emb.value);
    write_matrix(w, model.final_norm.gain.value);
    write_matrix(w, model.lm_head.value);

    for (auto& b : model.blocks) {
        write_matrix(w, b.norm1.gain.value);
        write_matrix(w, b.norm2.gain.value);
        write_bit_tensor(w, b.attn.wq);
        write_bit_tensor(w, b.attn.wk);
        write_bit_tensor(w, b.attn.wv);
        write_bit_tensor(w, b.attn.wo);

        auto& f = b.ffn;
        w.u64(f.n_branches);
        w.u64(f.r);
        write_bit_tensor(w, f.bit_up);
        write_bit_tensor(w, f.bit_down);
        if (f.n_branches > 0) {
            w.f64(f.fused_alpha());
            write_matrix(w, f.router.value);
            for (auto& hb : f.hp) {
                write_int8_tensor(w, hb.up);
                write_int8_tensor(w, hb.down);
            }
        }
    }
}

Model load_packed(const std::string& path) {
    io::Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "PQTM")
        throw std::runtime_error("not a packed model file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kPackedVersion)
        throw std::runtime_error("unsupported packed model version " + std::to_string(version));

    Model model(read_cfg(r));
    model.tok_emb.value = read_matrix(r);
    model.pos_emb.value = read_matrix(r);
    model.final_norm.gain.value = read_matrix(r);
    model.lm_head.value = read_matrix(r);

    for (auto& b : model.blocks) {
        b.norm1.gain.value = read_matrix(r);
        b.norm2.gain.value = read_matrix(r);
        read_bit_tensor(r, b.attn.wq);
        read_bit_tensor(r, b.attn.wk);
        read_bit_tensor(r, b.attn.wv);
        read_bit_tensor(r, b.attn.wo);

        auto& f = b.ffn;
        const std::uint64_t n = r.u64();
        const std::uint64_t rr = r.u64();
        if (n != f.n_branches || rr != f.r)
            throw std::runtime_error("packed model: FFN configuration mismatch");
        read_bit_tensor(r, f.bit_up);
        read_bit_tensor(r, f.bit_down);
        if (f.n_branches > 0) {
            f.set_fused_alpha(r.f64());
            f.router.value = read_matrix(r);
            f.alpha.value = Matrix();
            f.beta.value = Matrix();
            for (auto& hb : f.hp) {
                read_int8_tensor(r, hb.up);
                read_int8_tensor(r, hb.down);
            }
        }
    }
    model.mark_frozen();
    return model;
}

std::vector<std::uint8_t> generate(Model& model, const std::vector<std::uint8_t>& prompt,
                                   std::size_t n_tokens) {
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
    for (std::uint8_t t : prompt)
        if (t >= model.cfg.vocab_size)
            throw std::invalid_argument("generate: prompt token outside vocabulary");

    std::vector<std::uint8_t> ctx(prompt);
    std::vector<std::uint8_t> out;
    out.reserve(n_tokens);
    for (std::size_t i = 0; i < n_tokens; ++i) {
        std::vector<std::uint8_t> window = ctx;
        if (window.size() > model.cfg.max_seq_len)
            window.erase(window.begin(),
                         window.end() - static_cast<long>(model.cfg.max_seq_len));
        const Matrix logits = model.forward(window, window.size());
        const double* last = logits.row(logits.rows - 1);
        std::size_t best = 0;
        for (std::size_t v = 1; v < model.cfg.vocab_size; ++v)
            if (last[v] > last[best]) best = v;
        ctx.push_back(static_cast<std::uint8_t>(best));
        out.push_back(static_cast<std::uint8_t>(best));
    }
    return out;
}

// -- analytic accounting ----------------------------------------------------------

namespace {

std::uint64_t bits_to_bytes(std::uint64_t count, unsigned bits) {
    return (count * bits + 7) / 8;
}

}  // namespace

FootprintReport memory_footprint(const ModelConfig& cfg, const PrecisionPlan& plan) {
    cfg.validate();
    const std::uint64_t d = cfg.d_model;
    const std::uint64_t layers = cfg.n_layers;
    const std::uint64_t n = cfg.n_branches;
    const std::uint64_t r = n == 0 ? 0 : cfg.r;
    const std::uint64_t h1 = cfg.d_ffn_nominal - r;

    const std::uint64_t attn_params = 4 * d * d;            // per layer, 1-bit
    const std::uint64_t bitffn_params = 2 * d * h1;         // per layer, 1-bit
    const std::uint64_t branch_params = 2 * d * r;          // per branch per layer, INT8
    const std::uint64_t emb_params =
        2 * cfg.vocab_size * d + cfg.max_seq_len * d;       // token + head + positions
    const std::uint64_t norm_params = layers * 2 * d + d;
    const std::uint64_t router_params = layers * n * d;

    const std::uint64_t onebit_count = layers * (attn_params + bitffn_params);
    const std::uint64_t int8_count = layers * n * branch_params;

    // Scales: one fused per-tensor constant per 1-bit tensor, one per output
    // row of each INT8 tensor.
    const std::uint64_t onebit_tensors = layers * 6;
    const std::uint64_t int8_scale_rows = layers * n * (r + d);
    const std::uint64_t scale_count = onebit_tensors + int8_scale_rows;

    FootprintReport rep;
    rep.total_params = onebit_count + int8_count + emb_params + norm_params + router_params;
    rep.activated_params =
        rep.total_params - (n > 1 ? (n - 1) * layers * branch_params : 0);

    if (plan.uniform) {
        const unsigned b = plan.embedding_bits;
        rep.onebit_bytes = bits_to_bytes(onebit_count, b);
        rep.int8_bytes = bits_to_bytes(int8_count, b);
        rep.embedding_bytes = bits_to_bytes(emb_params, b);
        rep.norm_bytes = bits_to_bytes(norm_params, b);
        rep.router_bytes = bits_to_bytes(router_params, b);
        rep.scale_bytes = 0;  // scales exist only in the quantized plan
        rep.effective_bits = b;
        rep.transfer_bytes = rep.onebit_bytes + rep.int8_bytes / std::max<std::uint64_t>(n, 1) +
                             rep.embedding_bytes + rep.norm_bytes;
    } else {
        // Per-tensor packing: each 1-bit tensor pads to whole bytes.
        rep.onebit_bytes = 0;
        for (std::uint64_t l = 0; l < layers; ++l) {
            rep.onebit_bytes += 4 * bits_to_bytes(d * d, plan.onebit_bits);
            rep.onebit_bytes += 2 * bits_to_bytes(d * h1, plan.onebit_bits);
        }
        rep.int8_bytes = bits_to_bytes(int8_count, plan.int8_bits);
        rep.embedding_bytes = bits_to_bytes(emb_params, plan.embedding_bits);
        rep.norm_bytes = bits_to_bytes(norm_params, plan.norm_bits);
        rep.router_bytes = bits_to_bytes(router_params, plan.router_bits);
        rep.scale_bytes = bits_to_bytes(scale_count, plan.scale_bits);

        const std::uint64_t one_branch_bytes =
            n > 0 ? bits_to_bytes(layers * branch_params, plan.int8_bits) : 0;
        const std::uint64_t one_branch_scales =
            bits_to_bytes(onebit_tensors + layers * (r + d) * (n > 0 ? 1 : 0), plan.scale_bits);
        rep.transfer_bytes = rep.onebit_bytes + one_branch_bytes + one_branch_scales +
                             rep.embedding_bytes + rep.norm_bytes;

        const std::uint64_t qcount = onebit_count + int8_count;
        rep.effective_bits =
            qcount == 0 ? 0.0
                        : (static_cast<double>(onebit_count) * plan.onebit_bits +
                           static_cast<double>(int8_count) * plan.int8_bits) /
                              static_cast<double>(qcount);
    }
    rep.total_bytes = rep.onebit_bytes + rep.int8_bytes + rep.embedding_bytes + rep.norm_bytes +
                      rep.router_bytes + rep.scale_bytes;
    return rep;
}

double effective_bits_from_split(double frac_1bit, double frac_8bit) {
    if (frac_1bit < 0.0 || frac_8bit < 0.0)
        throw std::invalid_argument("effective bits: fractions must be non-negative");
    return frac_1bit * 1.0 + frac_8bit * 8.0;
}

std::string footprint_csv(const FootprintReport& r) {
    std::ostringstream out;
    out << "component,bytes\n";
    out << "onebit_weights," << r.onebit_bytes << "\n";
    out << "int8_weights," << r.int8_bytes << "\n";
    out << "embeddings," << r.embedding_bytes << "\n";
    out << "norms," << r.norm_bytes << "\n";
    out << "router," << r.router_bytes << "\n";
    out << "scales," << r.scale_bytes << "\n";
    out << "total," << r.total_bytes << "\n";
    out << "per_decode_transfer," << r.transfer_bytes << "\n";
    return out.str();
}

std::string footprint_summary(const FootprintReport& r) {
    std::ostringstream out;
    out.precision(4);
    out << "total params:      " << r.total_params << "\n";
    out << "activated params:  " << r.activated_params << "\n";
    out << "total bytes:       " << r.total_bytes << " ("
        << static_cast<double>(r.total_bytes) / 1e9 << " GB)\n";
    out << "per-decode bytes:  " << r.transfer_bytes << " ("
        << static_cast<double>(r.transfer_bytes) / 1e9 << " GB)\n";
    out << "effective bits:    " << r.effective_bits << "\n";
    return out.str();
}

// -- microbenchmarks ----------------------------------------------------------------

namespace {

double median(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
double time_ns(F&& fn, std::size_t reps) {
    std::vector<double> samples;
    samples.reserve(reps);
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(
            std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    }
    return median(samples);
}

}  // namespace

std::vector<BenchRow> bench_kernels(const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                    std::size_t reps) {
    if (reps == 0) throw std::invalid_argument("bench: reps must be >= 1");
    std::vector<BenchRow> rows;
    std::mt19937_64 rng(0xbecc);
    volatile long long sink = 0;

    for (const auto& [m, k] : sizes) {
        if (m == 0 || k == 0) throw std::invalid_argument("bench: sizes must be positive");
        std::vector<std::int8_t> signs(m * k);
        std::bernoulli_distribution coin(0.5);
        for (auto& s : signs) s = coin(rng) ? 1 : -1;
        quant::BinaryMatrix w;
        w.rows = m;
        w.cols = k;
        w.lambda = 1.0;
        w.bits = quant::pack_bits(signs);

        std::vector<std::int8_t> a(k);
        std::uniform_int_distribution<int> adist(-128, 127);
        for (auto& v : a) v = static_cast<std::int8_t>(adist(rng));

        quant::Int8Tensor w8;
        w8.rows = m;
        w8.cols = k;
        w8.values.resize(m * k);
        for (auto& v : w8.values) v = static_cast<std::int8_t>(adist(rng));
        w8.gamma.assign(m, 1.0);
        quant::Int8Tensor arow;
        arow.rows = 1;
        arow.cols = k;
        arow.values = a;
        arow.gamma = {1.0};

        Matrix wf(m, k), af(1, k);
        for (std::size_t i = 0; i < m * k; ++i) wf.data[i] = signs[i];
        for (std::size_t i = 0; i < k; ++i) af.data[i] = a[i];

        // Correctness gate before any timing.
        const auto ref = kernels::gemv_w1a8_ref(w, a);
        const auto lut_out = kernels::gemv_w1a8_lut(w, kernels::build_lut(a));
        if (ref != lut_out) throw std::logic_error("bench: LUT GEMV mismatch");
        const Matrix fref = matmul_nt(af, wf);
        for (std::size_t i = 0; i < m; ++i)
            if (fref(0, i) != static_cast<double>(ref[i]))
                throw std::logic_error("bench: float baseline mismatch");
        {
            const auto i8 = kernels::gemm_int8(w8, arow);
            double worst = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j)
                    acc += static_cast<double>(w8.values[i * k + j]) * a[j];
                worst = std::max(worst, std::fabs(acc - i8.at(0, i)));
            }
            if (worst != 0.0) throw std::logic_error("bench: INT8 GEMM mismatch");
        }

        BenchRow row;
        row.rows = m;
        row.cols = k;
        row.reps = reps;

        row.kernel = "gemv_w1a8_ref";
        row.median_ns = time_ns([&] { sink = sink + kernels::gemv_w1a8_ref(w, a)[0]; }, reps);
        rows.push_back(row);

        row.kernel = "gemv_w1a8_lut";
        row.median_ns = time_ns(
            [&] { sink = sink + kernels::gemv_w1a8_lut(w, kernels::build_lut(a))[0]; }, reps);
        rows.push_back(row);

        row.kernel = "gemm_int8";
        row.median_ns = time_ns([&] { sink = sink + kernels::gemm_int8(w8, arow).values[0]; }, reps);
        rows.push_back(row);

        row.kernel = "float_matmul";
        row.median_ns =
            time_ns([&] { sink = sink + static_cast<long long>(matmul_nt(af, wf).data[0]); }, reps);
        rows.push_back(row);
    }
    (void)sink;
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream out;
    out << "kernel,rows,cols,median_ns,reps\n";
    for (const auto& r : rows)
        out << r.kernel << ',' << r.rows << ',' << r.cols << ',' << r.median_ns << ',' << r.reps
            << "\n";
    return out.str();
}

}  // namespace pquant::infer

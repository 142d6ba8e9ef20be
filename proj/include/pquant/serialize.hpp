#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pquant::io {

// Little-endian binary primitives shared by the checkpoint and packed-model
// writers. The host is assumed little-endian (asserted at file open).

inline void check_little_endian() {
    const std::uint16_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    if (b != 1) throw std::runtime_error("big-endian hosts are not supported");
}

struct Writer {
    std::ofstream out;

    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        check_little_endian();
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
    }

    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out) throw std::runtime_error("write failed");
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { bytes(&v, 2); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void f64_array(const std::vector<double>& v) { bytes(v.data(), v.size() * 8); }
};

struct Reader {
    std::ifstream in;

    explicit Reader(const std::string& path) : in(path, std::ios::binary) {
        check_little_endian();
        if (!in) throw std::runtime_error("cannot open for reading: " + path);
    }

    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw std::runtime_error("unexpected end of file");
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint16_t v;
        bytes(&v, 2);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    std::vector<double> f64_array(std::size_t n) {
        std::vector<double> v(n);
        bytes(v.data(), n * 8);
        return v;
    }
};

}  // namespace pquant::io

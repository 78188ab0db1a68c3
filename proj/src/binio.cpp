#include "incvae/binio.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace incvae::binio {

void Writer::bytes(const unsigned char* p, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write failed");
}

void Writer::magic(std::string_view tag) {
    if (tag.size() != 4) throw Error("magic must be 4 bytes");
    bytes(reinterpret_cast<const unsigned char*>(tag.data()), 4);
}

void Writer::u32(std::uint32_t v) {
    std::array<unsigned char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffU);
    bytes(b.data(), b.size());
}

void Writer::u64(std::uint64_t v) {
    std::array<unsigned char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffU);
    bytes(b.data(), b.size());
}

void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

void Writer::matrix_f32(const Eigen::Ref<const Matrix>& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
}

void Writer::matrix_f64(const Eigen::Ref<const Matrix>& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

void Reader::fail(const std::string& what) const { throw Error(context_ + ": " + what); }

void Reader::check_shape(std::uint64_t rows, std::uint64_t cols) const {
    if (rows * cols > (1ULL << 28)) fail("implausible matrix shape");
}

void Reader::bytes(unsigned char* p, std::size_t n) {
    in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
}

void Reader::expect_magic(std::string_view tag) {
    std::array<unsigned char, 4> b{};
    bytes(b.data(), 4);
    if (std::memcmp(b.data(), tag.data(), 4) != 0) fail("unknown magic (expected " + std::string(tag) + ")");
}

std::uint32_t Reader::u32() {
    std::array<unsigned char, 4> b{};
    bytes(b.data(), b.size());
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t Reader::u64() {
    std::array<unsigned char, 8> b{};
    bytes(b.data(), b.size());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
    const auto n = u32();
    if (n > (1U << 24)) fail("implausible string length");
    std::string s(n, '\0');
    bytes(reinterpret_cast<unsigned char*>(s.data()), n);
    return s;
}

Matrix Reader::matrix_f32() {
    const auto rows = u32();
    const auto cols = u32();
    check_shape(rows, cols);
    Matrix m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = f32();
    return m;
}

Matrix Reader::matrix_f64() {
    const auto rows = u32();
    const auto cols = u32();
    check_shape(rows, cols);
    Matrix m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
}

bool Reader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace incvae::binio

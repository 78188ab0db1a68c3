#pragma once

// Little-endian primitives shared by the feature, model, bank and null-space
// file formats. Every container starts with a 4-byte magic and a u32 version.

#include "incvae/common.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

namespace incvae::binio {

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void magic(std::string_view tag);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void str(std::string_view s);
    // Shape (rows, cols) followed by row-major f32 values.
    void matrix_f32(const Eigen::Ref<const Matrix>& m);
    // Same, f64 payload; used where exact state must survive a round trip.
    void matrix_f64(const Eigen::Ref<const Matrix>& m);

private:
    void bytes(const unsigned char* p, std::size_t n);
    std::ostream& out_;
};

class Reader {
public:
    Reader(std::istream& in, std::string context) : in_(in), context_(std::move(context)) {}

    void expect_magic(std::string_view tag);
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str();
    Matrix matrix_f32();
    Matrix matrix_f64();
    bool at_end();

    [[noreturn]] void fail(const std::string& what) const;

private:
    void bytes(unsigned char* p, std::size_t n);
    void check_shape(std::uint64_t rows, std::uint64_t cols) const;
    std::istream& in_;
    std::string context_;
};

// FNV-1a over raw bytes; used to tie a model checkpoint to its prior bank.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace incvae::binio

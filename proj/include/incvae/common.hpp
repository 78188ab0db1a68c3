#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace incvae {

using ClassId = std::uint32_t;
using TaskId = std::uint32_t;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Single error type for the library. Callers that need to attribute a failure
// to a pipeline phase wrap the message (see pipeline.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent stream seeds and for the
// deterministic hold-out hash.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return mix_seed(mix_seed(base ^ mix_seed(a)) ^ mix_seed(b + 0x632be59bd9b4e019ULL));
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix m(rows, cols);
    // Fill row by row so results do not depend on storage order.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n01(rng);
    return m;
}

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
    return m;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace incvae

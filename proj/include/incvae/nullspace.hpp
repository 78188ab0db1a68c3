#pragma once

// Null-space gradient projection for incrementally trained layers.
//
// For every protected layer we keep the exact uncentered second moment of its
// inputs over all earlier tasks. Eigenvectors whose eigenvalues fall below
// a * lambda_min span the approximate null space; weight gradients are
// right-multiplied by the projector onto that span so that updates barely
// touch the responses to earlier inputs.

#include "incvae/common.hpp"

#include <iosfwd>
#include <vector>

namespace incvae {

struct SymmetricEigen {
    Vector values;   // ascending
    Matrix vectors;  // column i pairs with values(i)
    int sweeps = 0;
};

// Cyclic Jacobi rotations. Stops once the off-diagonal Frobenius norm is below
// tol * ||A||_F; throws if max_sweeps pass without getting there.
SymmetricEigen jacobi_eigen(const Matrix& a, double tol = 1e-12, int max_sweeps = 100);

struct LayerNullSpace {
    Matrix sigma;       // d_in x d_in
    std::size_t count = 0;
    Matrix basis;       // U_B, d_in x |B|
    Vector eigenvalues; // ascending, from the last compute_projector call
    std::size_t selected = 0;
    double threshold = 0.0;
    bool has_projector = false;
};

struct NullSpaceDiagnostics {
    std::size_t layer = 0;
    std::size_t count = 0;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    std::size_t selected = 0;
    double proportion = 0.0;
};

class NullSpaceState {
public:
    NullSpaceState() = default;
    NullSpaceState(std::vector<Eigen::Index> layer_input_dims, double a = 100.0, double eps_eig = 1e-12);

    std::size_t layer_count() const { return layers_.size(); }
    const LayerNullSpace& layer(std::size_t l) const;
    double threshold_factor() const { return a_; }
    double eigen_floor() const { return eps_eig_; }

    // Sigma <- (n * Sigma + X^T X) / (n + b) for a batch X of b layer inputs.
    void accumulate(std::size_t l, const Matrix& inputs);
    // Recomputes U_B for layer l from its current Sigma.
    const Matrix& compute_projector(std::size_t l);
    double proportion(std::size_t l) const;
    NullSpaceDiagnostics diagnostics(std::size_t l) const;

    void save(std::ostream& out) const;
    static NullSpaceState load(std::istream& in, const std::string& context);

private:
    LayerNullSpace& mutable_layer(std::size_t l);

    std::vector<LayerNullSpace> layers_;
    double a_ = 100.0;
    double eps_eig_ = 1e-12;
};

void accumulate_covariance(NullSpaceState& state, std::size_t layer, const Matrix& input_batch);
const Matrix& compute_projector(NullSpaceState& state, std::size_t layer);

// G * U_B * U_B^T: every row of G projected onto span(U_B).
Matrix project_gradient(const Matrix& gradient, const Matrix& basis);

// Sum of the selected eigenvalues over the trace. Zero trace yields 0.
double proportion(const NullSpaceState& state, std::size_t layer);

}  // namespace incvae

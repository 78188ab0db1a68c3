#include "incvae/nullspace.hpp"

#include "incvae/binio.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace incvae {

SymmetricEigen jacobi_eigen(const Matrix& input, double tol, int max_sweeps) {
    if (input.rows() != input.cols()) throw Error("jacobi_eigen: matrix is not square");
    const Eigen::Index n = input.rows();
    Matrix a = 0.5 * (input + input.transpose());
    Matrix v = Matrix::Identity(n, n);
    const double scale = a.norm();
    SymmetricEigen out;

    auto off_norm = [&a, n]() {
        double s = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < n; ++i)
                if (i != j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };

    int sweep = 0;
    if (scale > 0.0) {
        for (; sweep < max_sweeps && off_norm() > tol * scale; ++sweep) {
            for (Eigen::Index p = 0; p < n - 1; ++p) {
                for (Eigen::Index q = p + 1; q < n; ++q) {
                    const double apq = a(p, q);
                    if (apq == 0.0) continue;
                    // Rotation that zeroes a(p, q) (Golub & Van Loan, sym.schur2).
                    const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                    const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    const double c = 1.0 / std::sqrt(t * t + 1.0);
                    const double s = t * c;
                    for (Eigen::Index k = 0; k < n; ++k) {
                        const double akp = a(k, p);
                        const double akq = a(k, q);
                        a(k, p) = c * akp - s * akq;
                        a(k, q) = s * akp + c * akq;
                    }
                    for (Eigen::Index k = 0; k < n; ++k) {
                        const double apk = a(p, k);
                        const double aqk = a(q, k);
                        a(p, k) = c * apk - s * aqk;
                        a(q, k) = s * apk + c * aqk;
                    }
                    for (Eigen::Index k = 0; k < n; ++k) {
                        const double vkp = v(k, p);
                        const double vkq = v(k, q);
                        v(k, p) = c * vkp - s * vkq;
                        v(k, q) = s * vkp + c * vkq;
                    }
                }
            }
        }
        if (off_norm() > tol * scale)
            throw Error("jacobi_eigen: no convergence after " + std::to_string(max_sweeps) + " sweeps");
    }
    out.sweeps = sweep;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&a](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto src = order[static_cast<std::size_t>(k)];
        out.values(k) = a(src, src);
        out.vectors.col(k) = v.col(src);
    }
    return out;
}

NullSpaceState::NullSpaceState(std::vector<Eigen::Index> layer_input_dims, double a, double eps_eig)
    : a_(a), eps_eig_(eps_eig) {
    if (!(a > 0.0)) throw Error("null space threshold factor must be > 0");
    if (!(eps_eig >= 0.0)) throw Error("eigen floor must be >= 0");
    for (auto d : layer_input_dims) {
        if (d <= 0) throw Error("layer input dimension must be positive");
        LayerNullSpace l;
        l.sigma = Matrix::Zero(d, d);
        l.basis = Matrix::Identity(d, d);
        layers_.push_back(std::move(l));
    }
}

const LayerNullSpace& NullSpaceState::layer(std::size_t l) const {
    if (l >= layers_.size()) throw Error("null space: unknown layer " + std::to_string(l));
    return layers_[l];
}

LayerNullSpace& NullSpaceState::mutable_layer(std::size_t l) {
    if (l >= layers_.size()) throw Error("null space: unknown layer " + std::to_string(l));
    return layers_[l];
}

void NullSpaceState::accumulate(std::size_t l, const Matrix& inputs) {
    auto& layer = mutable_layer(l);
    if (inputs.rows() == 0) return;
    if (inputs.cols() != layer.sigma.cols())
        throw Error("null space layer " + std::to_string(l) + ": input dimension mismatch");
    const auto n = static_cast<double>(layer.count);
    const auto b = static_cast<double>(inputs.rows());
    Matrix outer = Matrix::Zero(inputs.cols(), inputs.cols());
    outer.selfadjointView<Eigen::Lower>().rankUpdate(inputs.transpose());
    outer.triangularView<Eigen::StrictlyUpper>() = outer.transpose();
    layer.sigma = (n * layer.sigma + outer) / (n + b);
    layer.count += inputs.rows();
}

const Matrix& NullSpaceState::compute_projector(std::size_t l) {
    auto& layer = mutable_layer(l);
    if (layer.count == 0) throw Error("null space layer " + std::to_string(l) + ": no samples accumulated");
    SymmetricEigen eig;
    try {
        eig = jacobi_eigen(layer.sigma);
    } catch (const Error& e) {
        throw Error("null space layer " + std::to_string(l) + ": " + e.what());
    }
    const double lambda_min = eig.values(0);
    const double lambda_max = eig.values(eig.values.size() - 1);
    layer.threshold = a_ * std::max(lambda_min, eps_eig_ * lambda_max);
    Eigen::Index k = 0;
    while (k < eig.values.size() && eig.values(k) <= layer.threshold) ++k;
    layer.basis = eig.vectors.leftCols(k);
    layer.eigenvalues = eig.values;
    layer.selected = static_cast<std::size_t>(k);
    layer.has_projector = true;
    return layer.basis;
}

double NullSpaceState::proportion(std::size_t l) const {
    const auto& layer = this->layer(l);
    if (!layer.has_projector) throw Error("null space layer " + std::to_string(l) + ": projector not computed");
    // Eigenvalues of a PSD matrix may come out as tiny negatives; clamp them.
    const Vector ev = layer.eigenvalues.cwiseMax(0.0);
    const double total = ev.sum();
    if (!(total > 0.0)) {
        std::cerr << "warning: null space layer " << l << " has zero trace; reporting R = 0\n";
        return 0.0;
    }
    const double kept = ev.head(static_cast<Eigen::Index>(layer.selected)).sum();
    return std::clamp(kept / total, 0.0, 1.0);
}

NullSpaceDiagnostics NullSpaceState::diagnostics(std::size_t l) const {
    const auto& layer = this->layer(l);
    NullSpaceDiagnostics d;
    d.layer = l;
    d.count = layer.count;
    if (layer.has_projector) {
        d.lambda_min = layer.eigenvalues(0);
        d.lambda_max = layer.eigenvalues(layer.eigenvalues.size() - 1);
        d.selected = layer.selected;
        d.proportion = proportion(l);
    }
    return d;
}

void NullSpaceState::save(std::ostream& out) const {
    binio::Writer w(out);
    w.magic("NSS1");
    w.u32(1);
    w.f64(a_);
    w.f64(eps_eig_);
    w.u32(static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
        w.u64(l.count);
        w.matrix_f64(l.sigma);
        w.u32(l.has_projector ? 1U : 0U);
        if (l.has_projector) {
            w.matrix_f64(l.basis);
            w.matrix_f64(l.eigenvalues);
            w.u64(l.selected);
            w.f64(l.threshold);
        }
    }
}

NullSpaceState NullSpaceState::load(std::istream& in, const std::string& context) {
    binio::Reader r(in, context);
    r.expect_magic("NSS1");
    if (const auto v = r.u32(); v != 1) r.fail("unsupported null space version " + std::to_string(v));
    NullSpaceState s;
    s.a_ = r.f64();
    s.eps_eig_ = r.f64();
    const auto n = r.u32();
    if (n > 64) r.fail("implausible layer count");
    for (std::uint32_t i = 0; i < n; ++i) {
        LayerNullSpace l;
        l.count = r.u64();
        l.sigma = r.matrix_f64();
        l.has_projector = r.u32() != 0;
        if (l.has_projector) {
            l.basis = r.matrix_f64();
            l.eigenvalues = r.matrix_f64();
            l.selected = r.u64();
            l.threshold = r.f64();
        } else {
            l.basis = Matrix::Identity(l.sigma.rows(), l.sigma.rows());
        }
        s.layers_.push_back(std::move(l));
    }
    return s;
}

void accumulate_covariance(NullSpaceState& state, std::size_t layer, const Matrix& input_batch) {
    state.accumulate(layer, input_batch);
}

const Matrix& compute_projector(NullSpaceState& state, std::size_t layer) { return state.compute_projector(layer); }

Matrix project_gradient(const Matrix& gradient, const Matrix& basis) {
    if (gradient.cols() != basis.rows())
        throw Error("project_gradient: gradient has " + std::to_string(gradient.cols()) + " columns, basis has " +
                    std::to_string(basis.rows()) + " rows");
    if (basis.cols() == 0) return Matrix::Zero(gradient.rows(), gradient.cols());
    return (gradient * basis) * basis.transpose();
}

double proportion(const NullSpaceState& state, std::size_t layer) { return state.proportion(layer); }

}  // namespace incvae

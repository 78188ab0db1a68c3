#pragma once

// Reference computations used by the unit and acceptance tests. Each one is
// written independently of the library code it checks.

#include "incvae/common.hpp"
#include "incvae/nn.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <vector>

namespace oracle {

using incvae::Matrix;
using incvae::Vector;

// Max over all parameters, inputs and conditioning entries of
// |analytic - numeric|, divided by the largest numeric magnitude. The loss is
// sum(out .* r) for a fixed random r.
inline double mlp_gradient_error(incvae::nn::Mlp net, const Matrix& x, const Matrix* cond, const Matrix& r,
                                 double h = 1e-6) {
    const auto trace = net.forward(x, cond);
    const auto g = net.backward(trace, r);
    auto loss = [&](const incvae::nn::Mlp& m, const Matrix& xi, const Matrix* ci) {
        return m.forward(xi, ci).output.cwiseProduct(r).sum();
    };
    double max_diff = 0.0;
    double max_ref = 0.0;
    auto compare = [&](double analytic, double numeric) {
        max_diff = std::max(max_diff, std::abs(analytic - numeric));
        max_ref = std::max(max_ref, std::abs(numeric));
    };
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
        auto& layer = net.layers()[l];
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
            const double keep = layer.weight.data()[i];
            layer.weight.data()[i] = keep + h;
            const double up = loss(net, x, cond);
            layer.weight.data()[i] = keep - h;
            const double down = loss(net, x, cond);
            layer.weight.data()[i] = keep;
            compare(g.layers[l].weight.data()[i], (up - down) / (2 * h));
        }
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
            const double keep = layer.bias(i);
            layer.bias(i) = keep + h;
            const double up = loss(net, x, cond);
            layer.bias(i) = keep - h;
            const double down = loss(net, x, cond);
            layer.bias(i) = keep;
            compare(g.layers[l].bias(i), (up - down) / (2 * h));
        }
    }
    Matrix xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = xp.data()[i];
        xp.data()[i] = keep + h;
        const double up = loss(net, xp, cond);
        xp.data()[i] = keep - h;
        const double down = loss(net, xp, cond);
        xp.data()[i] = keep;
        compare(g.input.data()[i], (up - down) / (2 * h));
    }
    if (cond != nullptr) {
        Matrix cp = *cond;
        for (Eigen::Index i = 0; i < cp.size(); ++i) {
            const double keep = cp.data()[i];
            cp.data()[i] = keep + h;
            const double up = loss(net, x, &cp);
            cp.data()[i] = keep - h;
            const double down = loss(net, x, &cp);
            cp.data()[i] = keep;
            compare(g.cond.data()[i], (up - down) / (2 * h));
        }
    }
    return max_diff / std::max(max_ref, 1e-12);
}

// Likelihood-plus-repulsion objective over a flat list of means. `active[k]`
// marks the means that carry an anchor term; repulsion covers every pair.
inline double prior_objective(const std::vector<Vector>& means, const std::vector<Vector>& anchors,
                              const std::vector<bool>& active, double lambda) {
    const double d = static_cast<double>(means.front().size());
    double v = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k)
        if (active[k]) v += 0.5 * (means[k] - anchors[k]).squaredNorm() + 0.5 * d * std::log(2 * std::numbers::pi);
    for (std::size_t i = 0; i < means.size(); ++i)
        for (std::size_t j = i + 1; j < means.size(); ++j)
            v -= 0.5 * lambda * std::log(0.5 * (means[i] - means[j]).squaredNorm());
    return v;
}

// Gradient descent with backtracking on prior_objective, moving active means only.
inline std::vector<Vector> minimize_prior_objective(std::vector<Vector> means, const std::vector<Vector>& anchors,
                                                    const std::vector<bool>& active, double lambda,
                                                    int max_iter = 200000, double gtol = 1e-10) {
    double f = prior_objective(means, anchors, active, lambda);
    double step = 1.0;
    for (int it = 0; it < max_iter; ++it) {
        std::vector<Vector> g(means.size(), Vector::Zero(means.front().size()));
        double gn = 0.0;
        for (std::size_t k = 0; k < means.size(); ++k) {
            if (!active[k]) continue;
            g[k] = means[k] - anchors[k];
            for (std::size_t j = 0; j < means.size(); ++j) {
                if (j == k) continue;
                const Vector diff = means[k] - means[j];
                g[k] -= lambda * diff / diff.squaredNorm();
            }
            gn += g[k].squaredNorm();
        }
        if (std::sqrt(gn) < gtol) break;
        step = std::min(step * 2.0, 1.0);
        while (true) {
            std::vector<Vector> trial = means;
            for (std::size_t k = 0; k < means.size(); ++k)
                if (active[k]) trial[k] -= step * g[k];
            const double ft = prior_objective(trial, anchors, active, lambda);
            if (std::isfinite(ft) && ft <= f - 1e-4 * step * gn) {
                means = std::move(trial);
                f = ft;
                break;
            }
            step *= 0.5;
            if (step < 1e-300) return means;
        }
    }
    return means;
}

// Monte-Carlo KL(N(a, I) || N(b, I)).
inline double mc_kld_isotropic(const Vector& a, const Vector& b, std::size_t n, std::uint64_t seed) {
    incvae::Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    double s = 0.0;
    Vector x(a.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < a.size(); ++k) x(k) = a(k) + nd(rng);
        s += 0.5 * (x - b).squaredNorm() - 0.5 * (x - a).squaredNorm();
    }
    return s / static_cast<double>(n);
}

// Monte-Carlo KL(N(mu, diag exp(logvar)) || N(m, I)).
inline double mc_kld_diag(const Vector& mu, const Vector& logvar, const Vector& m, std::size_t n, std::uint64_t seed) {
    incvae::Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const Vector sigma = (0.5 * logvar.array()).exp();
    double s = 0.0;
    Vector e(mu.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < mu.size(); ++k) e(k) = nd(rng);
        const Vector x = mu + sigma.cwiseProduct(e);
        const double log_q = -0.5 * e.squaredNorm() - 0.5 * logvar.sum();
        const double log_p = -0.5 * (x - m).squaredNorm();
        s += log_q - log_p;
    }
    return s / static_cast<double>(n);
}

// Random symmetric PSD matrix of the given rank.
inline Matrix random_psd(Eigen::Index n, Eigen::Index rank, incvae::Rng& rng) {
    const Matrix a = incvae::standard_normal(n, rank, rng);
    return a * a.transpose();
}

}  // namespace oracle

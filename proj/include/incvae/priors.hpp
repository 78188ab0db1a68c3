#pragma once

// Class-conditional latent priors N(mu_y, I). Means of new classes are placed
// by a fixed-point iteration that balances attraction to the class anchor (the
// mean encoder latent of the class) against pairwise KL repulsion from every
// other class. Means of earlier tasks are frozen and never move.

#include "incvae/common.hpp"

#include <iosfwd>
#include <map>
#include <vector>

namespace incvae {

class PriorBank {
public:
    PriorBank() = default;
    explicit PriorBank(Eigen::Index latent_dim);

    Eigen::Index latent_dim() const { return latent_dim_; }
    std::size_t size() const { return means_.size(); }
    bool contains(ClassId y) const { return means_.contains(y); }
    bool is_frozen(ClassId y) const;
    const Vector& mean(ClassId y) const;
    const std::map<ClassId, Vector>& means() const { return means_; }
    std::vector<ClassId> classes() const;
    std::vector<ClassId> frozen_classes() const;
    std::vector<ClassId> active_classes() const;

    void add(ClassId y, Vector mean);
    // Overwrites a non-frozen mean.
    void set_mean(ClassId y, Vector mean);
    // Marks every current class as frozen (end of a task).
    void freeze_all();

    void save(std::ostream& out) const;
    static PriorBank load(std::istream& in, const std::string& context);
    std::uint64_t content_hash() const;

    bool operator==(const PriorBank&) const = default;

private:
    Eigen::Index latent_dim_ = 0;
    std::map<ClassId, Vector> means_;
    std::map<ClassId, bool> frozen_;
};

using AnchorMap = std::map<ClassId, Vector>;

struct FpiConfig {
    double lambda = 900.0;
    double eps_conv = 1e-5;
    std::size_t max_iter = 10000;
    double pair_floor = 1e-8;

    void validate() const;
};

struct FpiTrace {
    std::vector<double> displacements;
    std::size_t iterations = 0;
    bool converged = false;
};

// Adds a mean for every anchor class (mu^(0) = anchor).
void init_means(PriorBank& bank, const AnchorMap& anchors);

enum class PriorInit { fpi, normal, uniform, zero };

// Ablation initializations that bypass the fixed point: N(0, I), U(-1, 1)^d or
// the origin (standard-normal prior shared by every class).
void init_means_random(PriorBank& bank, const std::vector<ClassId>& classes, PriorInit mode, Rng& rng);

// 0.5 * ||b - a||^2, the KL divergence between N(a, I) and N(b, I).
double kld_isotropic(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

// One synchronous update of the anchor classes. All reads use the current
// bank; the returned means are not written back.
AnchorMap fpi_step(const PriorBank& bank, const AnchorMap& anchors, const FpiConfig& config);

// Iterates fpi_step until the Frobenius displacement of the active means drops
// to eps_conv or max_iter is reached. Frozen means are read but never written.
FpiTrace run_fpi(PriorBank& bank, const AnchorMap& anchors, const FpiConfig& config);

// Objective whose stationary points are the fixed points of fpi_step:
//   sum_{y active} [ 0.5 ||mu_y - anchor_y||^2 + (d/2) log(2 pi) ]
//   + (lambda / 2) * sum_{unordered pairs {y, y'}} -log KL(N_y || N_y')
// Pairs range over every class in the bank. Coincident means make the log
// undefined; the function then returns +infinity.
double loss_optim(const PriorBank& bank, const AnchorMap& anchors, double lambda);

struct SeparationReport {
    double min_distance = 0.0;
    double mean_distance = 0.0;
    std::map<ClassId, double> nearest_neighbor;
};

SeparationReport separation_report(const PriorBank& bank);

}  // namespace incvae

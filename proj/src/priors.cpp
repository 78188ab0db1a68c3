#include "incvae/priors.hpp"

#include "incvae/binio.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace incvae {

PriorBank::PriorBank(Eigen::Index latent_dim) : latent_dim_(latent_dim) {
    if (latent_dim <= 0) throw Error("latent dimension must be positive");
}

bool PriorBank::is_frozen(ClassId y) const {
    const auto it = frozen_.find(y);
    if (it == frozen_.end()) throw Error("class " + std::to_string(y) + " not in prior bank");
    return it->second;
}

const Vector& PriorBank::mean(ClassId y) const {
    const auto it = means_.find(y);
    if (it == means_.end()) throw Error("class " + std::to_string(y) + " not in prior bank");
    return it->second;
}

std::vector<ClassId> PriorBank::classes() const {
    std::vector<ClassId> out;
    for (const auto& [y, m] : means_) out.push_back(y);
    return out;
}

std::vector<ClassId> PriorBank::frozen_classes() const {
    std::vector<ClassId> out;
    for (const auto& [y, f] : frozen_)
        if (f) out.push_back(y);
    return out;
}

std::vector<ClassId> PriorBank::active_classes() const {
    std::vector<ClassId> out;
    for (const auto& [y, f] : frozen_)
        if (!f) out.push_back(y);
    return out;
}

void PriorBank::add(ClassId y, Vector mean) {
    if (mean.size() != latent_dim_) throw Error("prior mean has wrong dimension");
    if (!mean.allFinite()) throw Error("prior mean is not finite");
    if (means_.contains(y)) throw Error("class " + std::to_string(y) + " already in prior bank");
    means_.emplace(y, std::move(mean));
    frozen_.emplace(y, false);
}

void PriorBank::set_mean(ClassId y, Vector mean) {
    if (is_frozen(y)) throw Error("class " + std::to_string(y) + " is frozen");
    if (mean.size() != latent_dim_) throw Error("prior mean has wrong dimension");
    means_.at(y) = std::move(mean);
}

void PriorBank::freeze_all() {
    for (auto& [y, f] : frozen_) f = true;
}

void PriorBank::save(std::ostream& out) const {
    binio::Writer w(out);
    w.magic("PRB1");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(latent_dim_));
    w.u32(static_cast<std::uint32_t>(means_.size()));
    for (const auto& [y, m] : means_) {
        w.u32(y);
        w.u32(frozen_.at(y) ? 1U : 0U);
        for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m(i));
    }
}

PriorBank PriorBank::load(std::istream& in, const std::string& context) {
    binio::Reader r(in, context);
    r.expect_magic("PRB1");
    if (const auto v = r.u32(); v != 1) r.fail("unsupported prior bank version " + std::to_string(v));
    const auto dim = static_cast<Eigen::Index>(r.u32());
    if (dim == 0 || dim > (1 << 16)) r.fail("invalid latent dimension");
    PriorBank bank(dim);
    const auto n = r.u32();
    for (std::uint32_t k = 0; k < n; ++k) {
        const ClassId y = r.u32();
        const bool frozen = r.u32() != 0;
        Vector m(dim);
        for (Eigen::Index i = 0; i < dim; ++i) m(i) = r.f64();
        bank.add(y, std::move(m));
        bank.frozen_[y] = frozen;
    }
    return bank;
}

std::uint64_t PriorBank::content_hash() const {
    std::ostringstream os;
    save(os);
    return binio::fnv1a(os.str());
}

void FpiConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("fpi: lambda must be >= 0");
    if (!(eps_conv > 0.0)) throw Error("fpi: eps_conv must be > 0");
    if (max_iter < 1) throw Error("fpi: max_iter must be >= 1");
    if (!(pair_floor > 0.0)) throw Error("fpi: pair_floor must be > 0");
}

void init_means(PriorBank& bank, const AnchorMap& anchors) {
    for (const auto& [y, a] : anchors) {
        if (bank.contains(y)) throw Error("init_means: class " + std::to_string(y) + " already in bank");
    }
    for (const auto& [y, a] : anchors) bank.add(y, a);
}

void init_means_random(PriorBank& bank, const std::vector<ClassId>& classes, PriorInit mode, Rng& rng) {
    for (auto y : classes) {
        Vector m;
        switch (mode) {
            case PriorInit::normal: m = standard_normal(bank.latent_dim(), 1, rng); break;
            case PriorInit::uniform: m = uniform_matrix(bank.latent_dim(), 1, -1.0, 1.0, rng); break;
            case PriorInit::zero: m = Vector::Zero(bank.latent_dim()); break;
            case PriorInit::fpi: throw Error("init_means_random: fpi mode needs anchors");
        }
        bank.add(y, std::move(m));
    }
}

double kld_isotropic(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
    if (a.size() != b.size()) throw Error("kld_isotropic: dimension mismatch");
    return 0.5 * (b - a).squaredNorm();
}

namespace {

void check_anchors(const PriorBank& bank, const AnchorMap& anchors) {
    for (const auto& [y, a] : anchors) {
        if (!bank.contains(y)) throw Error("fpi: anchor class " + std::to_string(y) + " not in bank");
        if (bank.is_frozen(y)) throw Error("fpi: class " + std::to_string(y) + " is frozen");
        if (a.size() != bank.latent_dim()) throw Error("fpi: anchor dimension mismatch");
    }
}

}  // namespace

AnchorMap fpi_step(const PriorBank& bank, const AnchorMap& anchors, const FpiConfig& config) {
    config.validate();
    check_anchors(bank, anchors);
    AnchorMap next;
    for (const auto& [y, anchor] : anchors) {
        const Vector& mu = bank.mean(y);
        Vector repulsion = Vector::Zero(bank.latent_dim());
        for (const auto& [other, mu_other] : bank.means()) {
            if (other == y) continue;
            const Vector diff = mu - mu_other;
            repulsion += diff / std::max(diff.squaredNorm(), config.pair_floor);
        }
        next.emplace(y, anchor + config.lambda * repulsion);
    }
    return next;
}

FpiTrace run_fpi(PriorBank& bank, const AnchorMap& anchors, const FpiConfig& config) {
    FpiTrace trace;
    for (std::size_t it = 0; it < config.max_iter; ++it) {
        const auto next = fpi_step(bank, anchors, config);
        double sq = 0.0;
        for (const auto& [y, m] : next) sq += (m - bank.mean(y)).squaredNorm();
        for (const auto& [y, m] : next) bank.set_mean(y, m);
        const double disp = std::sqrt(sq);
        trace.displacements.push_back(disp);
        trace.iterations = it + 1;
        if (!std::isfinite(disp)) throw Error("fpi: displacement became non-finite");
        if (disp <= config.eps_conv) {
            trace.converged = true;
            break;
        }
    }
    return trace;
}

double loss_optim(const PriorBank& bank, const AnchorMap& anchors, double lambda) {
    const auto d = static_cast<double>(bank.latent_dim());
    double value = 0.0;
    for (const auto& [y, anchor] : anchors) {
        if (anchor.size() != bank.latent_dim()) throw Error("loss_optim: anchor dimension mismatch");
        value += 0.5 * (bank.mean(y) - anchor).squaredNorm() + 0.5 * d * std::log(2.0 * std::numbers::pi);
    }
    if (lambda == 0.0) return value;
    const auto& means = bank.means();
    for (auto a = means.begin(); a != means.end(); ++a) {
        for (auto b = std::next(a); b != means.end(); ++b) {
            const double kld = kld_isotropic(a->second, b->second);
            if (kld <= 0.0) return std::numeric_limits<double>::infinity();
            value -= 0.5 * lambda * std::log(kld);
        }
    }
    return value;
}

SeparationReport separation_report(const PriorBank& bank) {
    if (bank.size() < 2) throw Error("separation_report: need at least two classes");
    SeparationReport rep;
    rep.min_distance = std::numeric_limits<double>::infinity();
    double sum = 0.0;
    std::size_t pairs = 0;
    for (const auto& [y, m] : bank.means()) rep.nearest_neighbor[y] = std::numeric_limits<double>::infinity();
    const auto& means = bank.means();
    for (auto a = means.begin(); a != means.end(); ++a) {
        for (auto b = std::next(a); b != means.end(); ++b) {
            const double dist = (a->second - b->second).norm();
            rep.min_distance = std::min(rep.min_distance, dist);
            rep.nearest_neighbor[a->first] = std::min(rep.nearest_neighbor[a->first], dist);
            rep.nearest_neighbor[b->first] = std::min(rep.nearest_neighbor[b->first], dist);
            sum += dist;
            ++pairs;
        }
    }
    rep.mean_distance = sum / static_cast<double>(pairs);
    return rep;
}

}  // namespace incvae

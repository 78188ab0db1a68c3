#include "incvae/classifier.hpp"

#include "incvae/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace incvae {

CosineClassifier::CosineClassifier(Eigen::Index dim, double beta) : dim_(dim), beta_(beta), weights_(0, dim) {
    if (dim <= 0) throw Error("classifier: dimension must be positive");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw Error("classifier: beta must be > 0");
}

bool CosineClassifier::contains(ClassId y) const { return std::binary_search(classes_.begin(), classes_.end(), y); }

void CosineClassifier::add_class(ClassId y, const Vector& w) {
    if (contains(y)) throw Error("classifier: class " + std::to_string(y) + " already registered");
    if (w.size() != dim_) throw Error("classifier: weight dimension mismatch");
    if (!w.allFinite()) throw Error("classifier: weight is not finite");
    if (!(w.norm() > 0.0)) throw Error("classifier: zero-norm weight for class " + std::to_string(y));
    const auto pos = std::lower_bound(classes_.begin(), classes_.end(), y) - classes_.begin();
    Matrix next(weights_.rows() + 1, dim_);
    next.topRows(pos) = weights_.topRows(pos);
    next.row(pos) = w.transpose();
    next.bottomRows(weights_.rows() - pos) = weights_.bottomRows(weights_.rows() - pos);
    weights_ = std::move(next);
    classes_.insert(classes_.begin() + pos, y);
}

Matrix CosineClassifier::logits(const Matrix& x) const {
    if (classes_.empty()) throw Error("classifier: no classes registered");
    if (x.cols() != dim_) throw Error("classifier: input dimension mismatch");
    const Vector wn = weights_.rowwise().norm();
    if ((wn.array() <= 0.0).any()) throw Error("classifier: zero-norm weight");
    const Vector xn = x.rowwise().norm();
    if ((xn.array() <= 0.0).any()) throw Error("classifier: zero-norm input");
    const Matrix cos = xn.cwiseInverse().asDiagonal() * (x * weights_.transpose()) * wn.cwiseInverse().asDiagonal();
    return cos / beta_;
}

namespace {

Matrix softmax_rows(const Matrix& s) {
    Matrix p = (s.colwise() - s.rowwise().maxCoeff()).array().exp().matrix();
    p = p.array().colwise() / p.rowwise().sum().array();
    return p;
}

}  // namespace

Prediction CosineClassifier::predict(const Vector& x) const {
    const Matrix s = logits(x.transpose());
    const Matrix p = softmax_rows(s);
    Prediction out;
    out.probabilities.assign(p.data(), p.data() + p.size());
    Eigen::Index best = 0;
    s.row(0).maxCoeff(&best);  // first maximum, i.e. the lowest class id
    out.label = classes_[static_cast<std::size_t>(best)];
    return out;
}

std::vector<ClassId> CosineClassifier::predict_rows(const Matrix& x) const {
    const Matrix s = logits(x);
    std::vector<ClassId> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::Index best = 0;
        s.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = classes_[static_cast<std::size_t>(best)];
    }
    return out;
}

void ClassifierConfig::validate() const {
    if (!(beta > 0.0)) throw Error("classifier: beta must be > 0");
    if (epochs == 0) throw Error("classifier: epochs must be >= 1");
    if (batch_size == 0) throw Error("classifier: batch size must be >= 1");
    if (!(lr > 0.0)) throw Error("classifier: learning rate must be > 0");
    if (samples_per_class == 0) throw Error("classifier: samples per class must be >= 1");
}

namespace {

// Mean cross-entropy over the batch; fills the weight gradient.
double cross_entropy_grad(const CosineClassifier& clf, const Matrix& x, const std::vector<Eigen::Index>& targets,
                          Matrix& grad, std::size_t& correct) {
    const Matrix& w = clf.weights();
    const Vector wn = w.rowwise().norm();
    const Matrix xh = x.rowwise().normalized();
    const Matrix wh = wn.cwiseInverse().asDiagonal() * w;
    const Matrix cos = xh * wh.transpose();
    const Matrix s = cos / clf.beta();
    Matrix p = softmax_rows(s);
    const auto b = static_cast<double>(x.rows());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto t = targets[static_cast<std::size_t>(i)];
        loss -= std::log(std::max(p(i, t), 1e-300));
        Eigen::Index best = 0;
        s.row(i).maxCoeff(&best);
        if (best == t) ++correct;
        p(i, t) -= 1.0;
    }
    const Matrix g = p / (b * clf.beta());  // dL/dcos
    const Vector gc = (g.cwiseProduct(cos)).colwise().sum().transpose();
    grad = wn.cwiseInverse().asDiagonal() * (g.transpose() * xh - gc.asDiagonal() * wh);
    return loss / b;
}

}  // namespace

FitStats fit(CosineClassifier& clf, const std::vector<ClassId>& classes, const TrainingSource& source,
             const ClassifierConfig& config, std::uint64_t seed, bool warm_start) {
    config.validate();
    if (classes.empty()) throw Error("classifier fit: no classes");
    if (clf.dim() <= 0) throw Error("classifier fit: classifier has no dimension");
    Rng rng(seed);

    CosineClassifier next(clf.dim(), config.beta);
    std::vector<ClassId> sorted = classes;
    std::sort(sorted.begin(), sorted.end());
    for (auto y : sorted) {
        if (warm_start && clf.contains(y)) {
            const auto k = std::lower_bound(clf.classes().begin(), clf.classes().end(), y) - clf.classes().begin();
            next.add_class(y, clf.weights().row(k).transpose());
        } else {
            next.add_class(y, standard_normal(clf.dim(), 1, rng) / std::sqrt(static_cast<double>(clf.dim())));
        }
    }
    std::map<ClassId, Eigen::Index> index;
    for (std::size_t k = 0; k < next.classes().size(); ++k) index[next.classes()[k]] = static_cast<Eigen::Index>(k);

    const bool resample = source.materialized == nullptr;
    if (resample) {
        if (!source.sampler) throw Error("classifier fit: source has neither data nor a sampler");
        if (source.samples_per_class == 0) throw Error("classifier fit: samples per class must be >= 1");
        for (auto y : sorted)
            if (std::find(source.classes.begin(), source.classes.end(), y) == source.classes.end())
                throw Error("classifier fit: class " + std::to_string(y) + " absent from source");
    } else {
        const auto present = source.materialized->classes();
        for (auto y : sorted)
            if (!std::binary_search(present.begin(), present.end(), y))
                throw Error("classifier fit: class " + std::to_string(y) + " absent from source");
        if (source.materialized->dim() != static_cast<std::size_t>(clf.dim()))
            throw Error("classifier fit: source dimension mismatch");
    }

    // Epoch plan: a shuffled label sequence (resample) or a shuffled row order.
    std::vector<std::size_t> rows;
    std::vector<ClassId> plan_labels;
    if (resample) {
        for (auto y : sorted) plan_labels.insert(plan_labels.end(), source.samples_per_class, y);
    } else {
        for (std::size_t i = 0; i < source.materialized->size(); ++i)
            if (index.contains(source.materialized->labels[i])) rows.push_back(i);
    }

    nn::AdamState opt({config.lr});
    FitStats stats;
    std::size_t correct = 0;
    std::size_t seen = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        correct = 0;
        seen = 0;
        double loss_sum = 0.0;
        const std::size_t n = resample ? plan_labels.size() : rows.size();
        if (resample)
            std::shuffle(plan_labels.begin(), plan_labels.end(), rng);
        else
            std::shuffle(rows.begin(), rows.end(), rng);
        for (std::size_t at = 0, batch = 0; at < n; at += config.batch_size, ++batch) {
            const std::size_t end = std::min(n, at + config.batch_size);
            Matrix x;
            std::vector<Eigen::Index> targets;
            if (resample) {
                std::map<ClassId, std::size_t> counts;
                for (std::size_t i = at; i < end; ++i) ++counts[plan_labels[i]];
                x.resize(static_cast<Eigen::Index>(end - at), clf.dim());
                Eigen::Index r = 0;
                for (const auto& [y, c] : counts) {
                    const Dataset d = source.sampler(y, c, derive_seed(seed, epoch * 1000003ULL + batch, y));
                    if (d.size() != c || d.dim() != static_cast<std::size_t>(clf.dim()))
                        throw Error("classifier fit: sampler returned a malformed batch");
                    x.middleRows(r, static_cast<Eigen::Index>(c)) = d.features;
                    targets.insert(targets.end(), c, index.at(y));
                    r += static_cast<Eigen::Index>(c);
                }
            } else {
                const std::vector<std::size_t> idx(rows.begin() + static_cast<std::ptrdiff_t>(at),
                                                   rows.begin() + static_cast<std::ptrdiff_t>(end));
                x = source.materialized->features(idx, Eigen::all);
                for (auto i : idx) targets.push_back(index.at(source.materialized->labels[i]));
            }
            Matrix grad;
            loss_sum += cross_entropy_grad(next, x, targets, grad, correct) * static_cast<double>(x.rows());
            seen += static_cast<std::size_t>(x.rows());
            const nn::ParamSlot s{next.weights().data(), grad.data(), grad.rows(), grad.cols(), true};
            nn::adam_step(std::span<const nn::ParamSlot>(&s, 1), opt);
        }
        stats.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1)));
    }
    stats.train_accuracy = seen == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(seen);
    if (!next.weights().allFinite()) throw Error("classifier fit: weights became non-finite");
    clf = std::move(next);
    return stats;
}

double accuracy(const CosineClassifier& clf, const Dataset& test) {
    if (test.empty()) throw Error("evaluate: empty test split");
    const auto pred = clf.predict_rows(test.features);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<double> evaluate(const CosineClassifier& clf, std::span<const Dataset> test_splits, std::size_t t) {
    if (t >= test_splits.size()) throw Error("evaluate: task index out of range");
    std::vector<double> row;
    for (std::size_t i = 0; i <= t; ++i) {
        for (auto y : test_splits[i].classes())
            if (!clf.contains(y)) throw Error("evaluate: classifier does not cover class " + std::to_string(y));
        row.push_back(accuracy(clf, test_splits[i]));
    }
    return row;
}

bool AccuracyMatrix::complete() const {
    if (rows.size() != tasks()) return false;
    for (std::size_t t = 0; t < rows.size(); ++t)
        if (rows[t].size() != t + 1) return false;
    return true;
}

void AccuracyMatrix::validate() const {
    if (tasks() == 0) throw Error("accuracy matrix: no tasks");
    if (!complete()) throw Error("accuracy matrix: incomplete");
    for (const auto& r : rows)
        for (double a : r)
            if (!(a >= 0.0 && a <= 1.0)) throw Error("accuracy matrix: entry outside [0, 1]");
}

double faa(const AccuracyMatrix& m) {
    m.validate();
    const auto& last = m.rows.back();
    return std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(last.size());
}

double avg_incremental_accuracy(const AccuracyMatrix& m, bool task_mean) {
    m.validate();
    double sum = 0.0;
    for (std::size_t t = 0; t < m.rows.size(); ++t) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t i = 0; i <= t; ++i) {
            const double w = task_mean ? 1.0 : static_cast<double>(m.test_sizes[i]);
            num += w * m.rows[t][i];
            den += w;
        }
        if (!(den > 0.0)) throw Error("accuracy matrix: empty test splits");
        sum += num / den;
    }
    return sum / static_cast<double>(m.rows.size());
}

MemoryReport memory_account(const VaeModel& model, const PriorBank& bank, const ClasswiseStats* stats,
                            const CosineClassifier& clf, std::size_t stored_samples) {
    const auto d = static_cast<std::size_t>(model.dims.input);
    const auto h = static_cast<std::size_t>(model.dims.hidden);
    const auto L = static_cast<std::size_t>(model.dims.latent);
    const auto e = static_cast<std::size_t>(model.dims.embed);
    const std::size_t c = uses_embeddings(model.variant) ? e : 0;
    const std::size_t k = clf.size();
    const std::size_t n_stats = stats != nullptr ? stats->size() : 0;
    MemoryReport rep;

    if (model.variant == Variant::upper_bound) {
        rep.analytic_total = stored_samples * d;
        rep.enumerated_total = stored_samples * d;
        rep.per_class = k == 0 ? 0 : rep.analytic_total / k;
        rep.breakdown["stored_features"] = rep.analytic_total;
        return rep;
    }

    // Analytic counts from the dimensions alone.
    const std::size_t full_decoder = (L + c) * h + h + (h + c) * h + h + (h + c) * d + d;
    std::size_t decoder = 0;
    std::size_t heads = 0;
    const std::size_t n_classes = model.variant == Variant::cgil_per_class ? model.class_decoders.size() : bank.size();
    if (model.variant == Variant::cgil_per_class) {
        decoder = n_classes * full_decoder;
    } else if (uses_task_heads(model.variant)) {
        decoder = (L + c) * h + (h + c) * h;
        heads = model.heads.size() * ((h + c) * d + h + h + d);
    } else {
        decoder = full_decoder;
    }
    const std::size_t means = uses_multi_gaussian_prior(model.variant) ? bank.size() * L : 0;
    const std::size_t embeddings = uses_embeddings(model.variant) ? model.embeddings.size() * e : 0;
    const std::size_t stat_params = n_stats * 2 * d;
    const std::size_t classifier = k * d;
    rep.breakdown = {{"decoder", decoder},       {"heads", heads},
                     {"prior_means", means},     {"embeddings", embeddings},
                     {"classwise_stats", stat_params}, {"classifier", classifier}};
    rep.analytic_total = decoder + heads + means + embeddings + stat_params + classifier;
    rep.per_class = (uses_multi_gaussian_prior(model.variant) ? L : 0) + (uses_embeddings(model.variant) ? e : 0) +
                    (n_stats > 0 ? 2 * d : 0) + d + (model.variant == Variant::cgil_per_class ? full_decoder : 0);

    // Enumeration over the tensors actually held.
    std::size_t n = 0;
    if (model.variant == Variant::cgil_per_class) {
        for (const auto& [y, dec] : model.class_decoders)
            for (const auto& l : dec.layers()) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    } else if (uses_task_heads(model.variant)) {
        const auto& layers = model.decoder.layers();
        for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += static_cast<std::size_t>(layers[l].weight.size());
        for (const auto& [t, head] : model.heads) n += head.parameter_count();
    } else {
        for (const auto& l : model.decoder.layers()) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    }
    if (uses_multi_gaussian_prior(model.variant))
        for (const auto& [y, m] : bank.means()) n += static_cast<std::size_t>(m.size());
    if (uses_embeddings(model.variant))
        for (const auto& [y, v] : model.embeddings) n += static_cast<std::size_t>(v.size());
    if (stats != nullptr)
        for (const auto& [y, s] : stats->all()) n += static_cast<std::size_t>(s.mean.size() + s.std.size());
    n += static_cast<std::size_t>(clf.weights().size());
    rep.enumerated_total = n;
    return rep;
}

}  // namespace incvae

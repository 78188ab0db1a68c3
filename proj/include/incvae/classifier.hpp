#pragma once

// Cosine-similarity softmax classifier trained on generated features, the
// incremental accuracy matrix and replay-memory accounting.

#include "incvae/common.hpp"
#include "incvae/cvae.hpp"
#include "incvae/dataio.hpp"
#include "incvae/priors.hpp"

#include <functional>
#include <map>
#include <span>
#include <vector>

namespace incvae {

struct Prediction {
    ClassId label = 0;
    std::vector<double> probabilities;  // in classes() order
};

class CosineClassifier {
public:
    CosineClassifier() = default;
    CosineClassifier(Eigen::Index dim, double beta);

    Eigen::Index dim() const { return dim_; }
    double beta() const { return beta_; }
    std::size_t size() const { return classes_.size(); }
    const std::vector<ClassId>& classes() const { return classes_; }
    bool contains(ClassId y) const;
    // Row k is the weight of classes()[k].
    const Matrix& weights() const { return weights_; }
    Matrix& weights() { return weights_; }
    std::size_t parameter_count() const { return static_cast<std::size_t>(weights_.size()); }

    void add_class(ClassId y, const Vector& w);

    // cos(x_i, w_k) / beta for every row of x.
    Matrix logits(const Matrix& x) const;
    Prediction predict(const Vector& x) const;
    // Argmax per row; ties go to the lowest class id.
    std::vector<ClassId> predict_rows(const Matrix& x) const;

private:
    Eigen::Index dim_ = 0;
    double beta_ = 0.05;
    std::vector<ClassId> classes_;  // ascending
    Matrix weights_;
};

struct ClassifierConfig {
    double beta = 0.05;
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::size_t samples_per_class = 500;
    bool resample = false;
    void validate() const;
};

// Draws n features of class y; the seed fully determines the draw.
using FeatureSampler = std::function<Dataset(ClassId y, std::size_t n, std::uint64_t seed)>;

// Training data for fit: either a materialized set, or a sampler queried
// afresh for every minibatch. An epoch of the resampling source has
// samples_per_class * |classes| records.
struct TrainingSource {
    const Dataset* materialized = nullptr;
    FeatureSampler sampler;
    std::vector<ClassId> classes;
    std::size_t samples_per_class = 0;
};

struct FitStats {
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;  // on the last epoch's batches
};

// Softmax cross-entropy on cos/beta with Adam. The classifier is rebuilt from
// `seed` over `classes` before training (a warm start keeps existing rows).
FitStats fit(CosineClassifier& clf, const std::vector<ClassId>& classes, const TrainingSource& source,
             const ClassifierConfig& config, std::uint64_t seed, bool warm_start = false);

double accuracy(const CosineClassifier& clf, const Dataset& test);

struct AccuracyMatrix {
    // rows[t][i]: accuracy on task i after training task t (i <= t).
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> test_sizes;  // per task, total number of tasks

    std::size_t tasks() const { return test_sizes.size(); }
    bool complete() const;
    void validate() const;
};

// Row t of the matrix: accuracy on each of the test splits 0..t, predictions
// competing among every class the classifier holds.
std::vector<double> evaluate(const CosineClassifier& clf, std::span<const Dataset> test_splits, std::size_t t);

double faa(const AccuracyMatrix& m);
// Mean over t of the accuracy on all classes seen at t. Pooled weighs every
// test record equally; task_mean averages row t's per-task accuracies.
double avg_incremental_accuracy(const AccuracyMatrix& m, bool task_mean = false);

struct MemoryReport {
    std::size_t analytic_total = 0;
    std::size_t enumerated_total = 0;
    std::size_t per_class = 0;  // increment for one more class
    std::map<std::string, std::size_t> breakdown;
};

// Replay memory kept between tasks: decoder (shared part, heads or per-class
// decoders), prior means, class embeddings, classwise statistics and the
// classifier rows. The encoder is not needed to generate and is left out.
// The upper bound stores `stored_samples` raw features and nothing else.
MemoryReport memory_account(const VaeModel& model, const PriorBank& bank, const ClasswiseStats* stats,
                            const CosineClassifier& clf, std::size_t stored_samples = 0);

}  // namespace incvae

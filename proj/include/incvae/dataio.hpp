#pragma once

// Feature datasets: file ingestion, synthetic cluster benchmarks, task
// splitting and per-class standardization statistics.

#include "incvae/common.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <vector>

namespace incvae {

struct FeatureRecord {
    Vector features;
    ClassId label = 0;
};

// Records stored row-wise: features is n x d, labels has n entries.
struct Dataset {
    Matrix features;
    std::vector<ClassId> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
    bool empty() const { return labels.empty(); }

    FeatureRecord record(std::size_t i) const;
    // Sorted unique class ids.
    std::vector<ClassId> classes() const;
    // Rows in the given order.
    Dataset subset(std::span<const std::size_t> rows) const;
    // Row indices per class, each list in ascending order.
    std::map<ClassId, std::vector<std::size_t>> rows_by_class() const;

    static Dataset from_records(std::span<const FeatureRecord> records);
    // Throws if shapes disagree or any value is non-finite.
    void validate() const;
};

Dataset concat(std::span<const Dataset> parts);

enum class FeatureFormat { binary, csv };

FeatureFormat format_from_path(const std::filesystem::path& path);

// Binary layout: "FVF1", u32 n, u32 d, then n x (u32 label, d x f32), all
// little-endian. CSV: "label,f_1,...,f_d" per line, no header.
Dataset load_feature_dataset(const std::filesystem::path& path, FeatureFormat format);
void write_feature_dataset(const std::filesystem::path& path, const Dataset& data, FeatureFormat format);

struct TaskStream {
    std::vector<Dataset> tasks;
    std::vector<std::vector<ClassId>> label_spaces;

    std::size_t size() const { return tasks.size(); }
};

using TaskSchedule = std::vector<std::vector<ClassId>>;

// Consecutive groups of ceil(K / n_tasks) classes; the final group takes the
// remainder (196 classes over 10 tasks -> 9 x 20 + 16).
TaskSchedule uniform_schedule(std::span<const ClassId> classes, std::size_t n_tasks);
TaskSchedule schedule_from_sizes(std::span<const ClassId> classes, std::span<const std::size_t> sizes);

TaskStream split_tasks(const Dataset& data, const TaskSchedule& schedule);

struct SynthClusters {
    Dataset data;
    Matrix centers;  // K x d, row k is class k's center
};

// Class k ~ N(center_k, spread^2 I) with center_k ~ N(0, I). Values are rounded
// to f32 so the dataset survives a binary round trip unchanged.
SynthClusters synth_clusters(std::size_t n_classes, std::size_t dim, std::size_t n_per_class, double spread,
                             std::uint64_t seed);

struct HoldoutSplit {
    Dataset train;
    Dataset test;
};

// Per class, the records with the smallest seeded hash of their row index go
// to the test part (round(test_fraction * n_class) of them). Order within
// each part follows the original row order.
HoldoutSplit split_holdout(const Dataset& data, double test_fraction, std::uint64_t seed);

struct ClassStats {
    Vector mean;
    Vector std;
};

class ClasswiseStats {
public:
    static constexpr double kDefaultStdFloor = 1e-6;

    explicit ClasswiseStats(double std_floor = kDefaultStdFloor);

    // Registers every class of task_data. Classes already present are an error;
    // stats are frozen at registration.
    void update(const Dataset& task_data);

    bool contains(ClassId y) const { return stats_.contains(y); }
    const ClassStats& at(ClassId y) const;
    const std::map<ClassId, ClassStats>& all() const { return stats_; }
    double std_floor() const { return std_floor_; }
    std::size_t size() const { return stats_.size(); }
    std::size_t parameter_count() const;

    Vector normalize(const Eigen::Ref<const Vector>& x, ClassId y) const;
    Vector denormalize(const Eigen::Ref<const Vector>& x_norm, ClassId y) const;
    // Row-wise versions; labels[i] selects the statistics for row i.
    Matrix normalize_rows(const Matrix& x, std::span<const ClassId> labels) const;
    Matrix denormalize_rows(const Matrix& x_norm, std::span<const ClassId> labels) const;

    void insert(ClassId y, ClassStats s);

private:
    double std_floor_;
    std::map<ClassId, ClassStats> stats_;
};

ClasswiseStats update_classwise_stats(ClasswiseStats stats, const Dataset& task_data);

}  // namespace incvae

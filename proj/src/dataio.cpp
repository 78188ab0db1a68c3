#include "incvae/dataio.hpp"

#include "incvae/binio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

namespace incvae {

FeatureRecord Dataset::record(std::size_t i) const {
    if (i >= size()) throw Error("record index out of range");
    return {features.row(static_cast<Eigen::Index>(i)).transpose(), labels[i]};
}

std::vector<ClassId> Dataset::classes() const {
    std::set<ClassId> s(labels.begin(), labels.end());
    return {s.begin(), s.end()};
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        out.labels.push_back(labels[rows[i]]);
    }
    return out;
}

std::map<ClassId, std::vector<std::size_t>> Dataset::rows_by_class() const {
    std::map<ClassId, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
    return out;
}

Dataset Dataset::from_records(std::span<const FeatureRecord> records) {
    Dataset out;
    if (records.empty()) return out;
    const auto d = records.front().features.size();
    out.features.resize(static_cast<Eigen::Index>(records.size()), d);
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].features.size() != d) throw Error("dimension mismatch between records");
        out.features.row(static_cast<Eigen::Index>(i)) = records[i].features.transpose();
        out.labels.push_back(records[i].label);
    }
    out.validate();
    return out;
}

void Dataset::validate() const {
    if (static_cast<std::size_t>(features.rows()) != labels.size())
        throw Error("feature rows and label count disagree");
    if (!features.allFinite()) throw Error("non-finite feature value");
}

Dataset concat(std::span<const Dataset> parts) {
    Dataset out;
    Eigen::Index rows = 0;
    Eigen::Index dim = -1;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        if (dim >= 0 && p.features.cols() != dim) throw Error("concat: dimension mismatch");
        dim = p.features.cols();
        rows += p.features.rows();
    }
    if (dim < 0) return out;
    out.features.resize(rows, dim);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        out.features.middleRows(at, p.features.rows()) = p.features;
        at += p.features.rows();
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

FeatureFormat format_from_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".csv" ? FeatureFormat::csv : FeatureFormat::binary;
}

namespace {

constexpr std::uint32_t kMaxDim = 1U << 20;

Dataset load_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    binio::Reader r(in, path.string());
    r.expect_magic("FVF1");
    const auto n = r.u32();
    const auto d = r.u32();
    if (d == 0 || d > kMaxDim) r.fail("invalid dimension " + std::to_string(d));
    if (static_cast<std::uint64_t>(n) * d > (1ULL << 30)) r.fail("implausible record count");
    Dataset out;
    out.features.resize(n, d);
    out.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        out.labels[i] = r.u32();
        for (std::uint32_t j = 0; j < d; ++j) {
            const float v = r.f32();
            if (!std::isfinite(v))
                r.fail("non-finite value at record " + std::to_string(i) + ", column " + std::to_string(j));
            out.features(i, j) = v;
        }
    }
    if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(n) + " records");
    return out;
}

double parse_double(std::string_view tok, std::size_t line_no) {
    while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\t')) tok.remove_prefix(1);
    while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t' || tok.back() == '\r')) tok.remove_suffix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw Error("csv line " + std::to_string(line_no) + ": cannot parse '" + std::string(tok) + "'");
    if (!std::isfinite(v)) throw Error("csv line " + std::to_string(line_no) + ": non-finite value");
    return v;
}

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<double> values;
    std::vector<ClassId> labels;
    std::size_t dim = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        std::vector<std::string_view> toks;
        std::string_view rest(line);
        for (;;) {
            const auto comma = rest.find(',');
            toks.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (toks.size() < 2) throw Error("csv line " + std::to_string(line_no) + ": expected label and features");
        const double label = parse_double(toks[0], line_no);
        if (label < 0 || label != std::floor(label) || label > 4294967295.0)
            throw Error("csv line " + std::to_string(line_no) + ": label must be a non-negative integer");
        if (dim == 0) dim = toks.size() - 1;
        if (toks.size() - 1 != dim)
            throw Error("csv line " + std::to_string(line_no) + ": dimension mismatch (" +
                        std::to_string(toks.size() - 1) + " vs " + std::to_string(dim) + ")");
        labels.push_back(static_cast<ClassId>(label));
        for (std::size_t j = 1; j < toks.size(); ++j) values.push_back(parse_double(toks[j], line_no));
    }
    Dataset out;
    out.labels = std::move(labels);
    out.features.resize(static_cast<Eigen::Index>(out.labels.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < out.labels.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j)
            out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * dim + j];
    return out;
}

}  // namespace

Dataset load_feature_dataset(const std::filesystem::path& path, FeatureFormat format) {
    auto out = format == FeatureFormat::binary ? load_binary(path) : load_csv(path);
    out.validate();
    return out;
}

void write_feature_dataset(const std::filesystem::path& path, const Dataset& data, FeatureFormat format) {
    data.validate();
    if (format == FeatureFormat::binary) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + path.string());
        binio::Writer w(out);
        w.magic("FVF1");
        w.u32(static_cast<std::uint32_t>(data.size()));
        w.u32(static_cast<std::uint32_t>(data.dim()));
        for (std::size_t i = 0; i < data.size(); ++i) {
            w.u32(data.labels[i]);
            for (Eigen::Index j = 0; j < data.features.cols(); ++j)
                w.f32(static_cast<float>(data.features(static_cast<Eigen::Index>(i), j)));
        }
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i];
        for (Eigen::Index j = 0; j < data.features.cols(); ++j)
            out << ',' << data.features(static_cast<Eigen::Index>(i), j);
        out << '\n';
    }
}

TaskSchedule uniform_schedule(std::span<const ClassId> classes, std::size_t n_tasks) {
    if (n_tasks == 0 || n_tasks > classes.size()) throw Error("uniform_schedule: invalid task count");
    const std::size_t per = (classes.size() + n_tasks - 1) / n_tasks;
    std::vector<std::size_t> sizes(n_tasks, per);
    const std::size_t used = per * (n_tasks - 1);
    if (used >= classes.size()) throw Error("uniform_schedule: classes do not fill the final task");
    sizes.back() = classes.size() - used;
    return schedule_from_sizes(classes, sizes);
}

TaskSchedule schedule_from_sizes(std::span<const ClassId> classes, std::span<const std::size_t> sizes) {
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != classes.size())
        throw Error("schedule sizes do not sum to the class count");
    TaskSchedule out;
    std::size_t at = 0;
    for (auto s : sizes) {
        if (s == 0) throw Error("schedule contains an empty task");
        out.emplace_back(classes.begin() + static_cast<std::ptrdiff_t>(at),
                         classes.begin() + static_cast<std::ptrdiff_t>(at + s));
        at += s;
    }
    return out;
}

TaskStream split_tasks(const Dataset& data, const TaskSchedule& schedule) {
    std::map<ClassId, std::size_t> owner;
    for (std::size_t t = 0; t < schedule.size(); ++t) {
        if (schedule[t].empty()) throw Error("task " + std::to_string(t + 1) + " has no classes");
        for (auto y : schedule[t]) {
            if (!owner.emplace(y, t).second)
                throw Error("schedule overlap: class " + std::to_string(y) + " appears in more than one task");
        }
    }
    const auto by_class = data.rows_by_class();
    for (const auto& [y, t] : owner) {
        if (!by_class.contains(y))
            throw Error("scheduled class " + std::to_string(y) + " absent from data");
    }
    std::vector<std::vector<std::size_t>> rows(schedule.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto it = owner.find(data.labels[i]);
        if (it != owner.end()) rows[it->second].push_back(i);
    }
    TaskStream out;
    for (std::size_t t = 0; t < schedule.size(); ++t) {
        out.tasks.push_back(data.subset(rows[t]));
        auto ls = schedule[t];
        std::sort(ls.begin(), ls.end());
        out.label_spaces.push_back(std::move(ls));
    }
    return out;
}

SynthClusters synth_clusters(std::size_t n_classes, std::size_t dim, std::size_t n_per_class, double spread,
                             std::uint64_t seed) {
    if (n_classes < 1) throw Error("synth_clusters: need at least one class");
    if (dim < 2) throw Error("synth_clusters: dimension must be >= 2");
    if (n_per_class < 1) throw Error("synth_clusters: need at least one record per class");
    if (!(spread > 0.0) || !std::isfinite(spread)) throw Error("synth_clusters: spread must be positive");

    Rng rng(seed);
    SynthClusters out;
    out.centers = standard_normal(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(dim), rng);
    out.centers = out.centers.cast<float>().cast<double>();
    const auto n = static_cast<Eigen::Index>(n_classes * n_per_class);
    out.data.features.resize(n, static_cast<Eigen::Index>(dim));
    out.data.labels.reserve(static_cast<std::size_t>(n));
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            for (std::size_t j = 0; j < dim; ++j) {
                const double v = out.centers(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) +
                                 spread * n01(rng);
                out.data.features(row, static_cast<Eigen::Index>(j)) = static_cast<float>(v);
            }
            out.data.labels.push_back(static_cast<ClassId>(k));
        }
    }
    return out;
}

HoldoutSplit split_holdout(const Dataset& data, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw Error("test fraction must be in [0, 1)");
    std::vector<bool> is_test(data.size(), false);
    for (auto& [y, rows] : data.rows_by_class()) {
        auto order = rows;
        std::stable_sort(order.begin(), order.end(), [seed](std::size_t a, std::size_t b) {
            return derive_seed(seed, a) < derive_seed(seed, b);
        });
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
        for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
    }
    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> test_rows;
    for (std::size_t i = 0; i < data.size(); ++i) (is_test[i] ? test_rows : train_rows).push_back(i);
    return {data.subset(train_rows), data.subset(test_rows)};
}

ClasswiseStats::ClasswiseStats(double std_floor) : std_floor_(std_floor) {
    if (!(std_floor > 0.0)) throw Error("std floor must be positive");
}

void ClasswiseStats::update(const Dataset& task_data) {
    const auto by_class = task_data.rows_by_class();
    for (const auto& [y, rows] : by_class) {
        if (stats_.contains(y)) throw Error("class " + std::to_string(y) + " already has classwise statistics");
    }
    for (const auto& [y, rows] : by_class) {
        const auto block = task_data.features(rows, Eigen::all);
        ClassStats s;
        s.mean = block.colwise().mean().transpose();
        const Matrix centered = block.rowwise() - s.mean.transpose();
        s.std = (centered.array().square().colwise().sum() / static_cast<double>(rows.size()))
                    .sqrt()
                    .transpose()
                    .max(std_floor_);
        stats_.emplace(y, std::move(s));
    }
}

const ClassStats& ClasswiseStats::at(ClassId y) const {
    const auto it = stats_.find(y);
    if (it == stats_.end()) throw Error("no classwise statistics for class " + std::to_string(y));
    return it->second;
}

std::size_t ClasswiseStats::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [y, s] : stats_) n += static_cast<std::size_t>(s.mean.size() + s.std.size());
    return n;
}

Vector ClasswiseStats::normalize(const Eigen::Ref<const Vector>& x, ClassId y) const {
    const auto& s = at(y);
    if (x.size() != s.mean.size()) throw Error("normalize: dimension mismatch");
    return ((x - s.mean).array() / s.std.array()).matrix();
}

Vector ClasswiseStats::denormalize(const Eigen::Ref<const Vector>& x_norm, ClassId y) const {
    const auto& s = at(y);
    if (x_norm.size() != s.mean.size()) throw Error("denormalize: dimension mismatch");
    return (x_norm.array() * s.std.array()).matrix() + s.mean;
}

Matrix ClasswiseStats::normalize_rows(const Matrix& x, std::span<const ClassId> labels) const {
    if (static_cast<std::size_t>(x.rows()) != labels.size()) throw Error("normalize_rows: label count mismatch");
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        out.row(i) = normalize(x.row(i).transpose(), labels[static_cast<std::size_t>(i)]).transpose();
    return out;
}

Matrix ClasswiseStats::denormalize_rows(const Matrix& x_norm, std::span<const ClassId> labels) const {
    if (static_cast<std::size_t>(x_norm.rows()) != labels.size())
        throw Error("denormalize_rows: label count mismatch");
    Matrix out(x_norm.rows(), x_norm.cols());
    for (Eigen::Index i = 0; i < x_norm.rows(); ++i)
        out.row(i) = denormalize(x_norm.row(i).transpose(), labels[static_cast<std::size_t>(i)]).transpose();
    return out;
}

void ClasswiseStats::insert(ClassId y, ClassStats s) {
    if (!stats_.emplace(y, std::move(s)).second)
        throw Error("class " + std::to_string(y) + " already has classwise statistics");
}

ClasswiseStats update_classwise_stats(ClasswiseStats stats, const Dataset& task_data) {
    stats.update(task_data);
    return stats;
}

}  // namespace incvae

#pragma once

// Task-by-task training loop, reports, ablation grids and checkpoint
// diagnostics.
//
// Per task t the order is fixed: normalize and register class statistics,
// place the prior means, train the VAE, update the null space, snapshot,
// generate features for every class seen so far, then adapt and evaluate the
// classifier. Only means, statistics, covariances, projectors and model
// parameters cross task boundaries; raw features of earlier tasks never do
// (the upper-bound baseline excepted, by definition).

#include "incvae/classifier.hpp"
#include "incvae/config.hpp"
#include "incvae/cvae.hpp"
#include "incvae/dataio.hpp"
#include "incvae/nullspace.hpp"
#include "incvae/priors.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace incvae {

// Error annotated with the task (1-based) and phase it came from.
class PhaseError : public Error {
public:
    PhaseError(std::size_t task, std::string phase, const std::string& what);
    std::size_t task() const { return task_; }
    const std::string& phase() const { return phase_; }

private:
    std::size_t task_;
    std::string phase_;
};

struct PreparedData {
    TaskSchedule schedule;
    std::vector<Dataset> train;  // per task
    std::vector<Dataset> test;   // per task
    std::size_t dim = 0;
};

PreparedData prepare_data(const ExperimentConfig& config);

struct TaskRecord {
    std::vector<ClassId> classes;
    std::size_t fpi_iterations = 0;
    bool fpi_converged = false;
    std::vector<double> fpi_displacements;
    std::optional<SeparationReport> separation;
    std::vector<NullSpaceDiagnostics> nullspace;  // per projected layer, after this task
    std::optional<double> drift;                  // task-1 samples vs the post-task-1 decoder
    bool frozen_means_unchanged = true;
    double final_vae_loss = 0.0;
    double classifier_train_accuracy = 0.0;
};

struct SeedRun {
    std::uint64_t seed = 0;
    AccuracyMatrix accuracy;
    double faa = 0.0;
    std::optional<double> aia;  // only when every row was evaluated
    std::vector<TaskRecord> tasks;
    MemoryReport memory;
    std::map<std::string, double> seconds;  // wall clock per phase; not part of the report
};

// State handed to RunOptions::on_task_end after every task.
struct TaskState {
    std::size_t task = 0;
    const VaeModel& model;
    const PriorBank& bank;
    const NullSpaceState* nullspace;
    const ClasswiseStats* stats;
    const CosineClassifier* classifier;
};

struct RunOptions {
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints
    std::function<void(const TaskState&)> on_task_end;
    bool verbose = false;
};

struct RunReport {
    ExperimentConfig config;
    std::vector<SeedRun> runs;
    double faa_mean = 0.0;
    double faa_std = 0.0;
    std::optional<double> aia_mean;
    std::optional<double> aia_std;
    std::optional<double> mean_proportion;
    std::size_t memory_total = 0;
    std::size_t memory_per_class = 0;
    std::size_t memory_enumerated = 0;
};

SeedRun run_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                 const RunOptions& options = {});
RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// Canonical JSON text of a report (no timings). Identical runs give identical text.
std::string report_json(const RunReport& report);
std::string timings_json(const RunReport& report);
// Per seed, task row and task column: seed,after_task,task,accuracy.
std::string accuracy_csv(const RunReport& report);
// seed,task,layer_id,n_l,lambda_min,lambda_max,selected,R
std::string nullspace_csv(const RunReport& report);
// Writes report.json, timings.json, accuracy.csv and nullspace.csv.
void write_report(const RunReport& report, const std::filesystem::path& dir);

struct AblationRow {
    std::string name;
    ExperimentConfig config;
    RunReport report;
};

// Runs every configuration; they must share data settings and seeds.
std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, ExperimentConfig>>& grid,
                                      const RunOptions& options = {});
// {ceo, fo} x {frozen, retrained, nullspace}, fod, fodce, cgil, upper and the
// normal / uniform prior initializations of fo with null space.
std::vector<std::pair<std::string, ExperimentConfig>> standard_grid(const ExperimentConfig& base);
// name,variant,faa_mean,faa_std,aia_mean,memory_total,memory_per_class,mean_R
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct Checkpoint {
    std::size_t task = 0;  // 0-based index of the last trained task
    VaeModel model;
    PriorBank bank;
    std::optional<NullSpaceState> nullspace;
    std::optional<ClasswiseStats> stats;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Relative Frobenius distance ||X_after - X_before|| / ||X_before|| of the
// decoder outputs on fixed prior samples of `classes`.
double decoder_drift(const VaeModel& before, const VaeModel& after, const PriorBank& bank,
                     const std::vector<ClassId>& classes, std::size_t n_samples, std::uint64_t seed);

struct RTableRow {
    std::size_t task = 0;
    NullSpaceDiagnostics diag;
};

struct PcaPoint {
    ClassId label = 0;
    double x = 0.0;
    double y = 0.0;
};

struct Diagnostics {
    std::vector<double> drift_consecutive;  // checkpoint k vs k + 1
    std::vector<double> drift_from_first;   // checkpoint 0 vs k + 1
    std::vector<RTableRow> r_table;
    std::vector<std::optional<SeparationReport>> separation;  // per checkpoint
    std::vector<PcaPoint> pca;  // decoded prior samples of the last checkpoint
};

// Needs at least two checkpoints of the same run, ordered by task.
Diagnostics diagnose(const std::vector<Checkpoint>& checkpoints, std::size_t n_samples, std::uint64_t seed);
void write_diagnostics(const Diagnostics& d, const std::filesystem::path& dir);

// Regenerates features from a checkpoint, refits the classifier and evaluates
// on the test splits of every task up to the checkpoint's task.
std::vector<double> evaluate_checkpoint(const ExperimentConfig& config, const Checkpoint& ckpt, std::uint64_t seed);

}  // namespace incvae

#pragma once

// Experiment configuration. Text form is one `key = value` per line, `#`
// starts a comment. Every key can be overridden by an environment variable
// named INCVAE_<KEY> (upper case), e.g. INCVAE_EPOCHS=20.

#include "incvae/classifier.hpp"
#include "incvae/cvae.hpp"
#include "incvae/priors.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace incvae {

enum class AdaptMode { per_task, final_only };

struct ExperimentConfig {
    Variant variant = Variant::fo;

    // Data: a feature file, or synthetic clusters when data_path is empty.
    std::string data_path;
    std::size_t synth_classes = 20;
    std::size_t synth_dim = 64;
    std::size_t synth_per_class = 250;
    double synth_spread = 0.35;
    std::uint64_t data_seed = 7;
    double test_fraction = 0.2;
    // Either n_tasks equal groups or explicit task sizes (comma separated).
    std::size_t n_tasks = 4;
    std::vector<std::size_t> task_sizes;

    // Priors.
    PriorInit prior_init = PriorInit::fpi;
    double lambda = 900.0;
    double eps_conv = 1e-5;
    std::size_t max_iter = 10000;

    // Null space.
    bool nullspace = true;
    double a = 100.0;
    double eps_eig = 1e-12;
    std::size_t cov_passes = 8;
    ProjectionStage projection_stage = ProjectionStage::both;

    // VAE.
    std::size_t hidden = 64;
    std::size_t latent = 16;
    std::size_t embed = 10;
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr = 5e-4;
    double lr_ortho = 5e-5;
    double kappa = 1.0;
    bool frozen_decoder = false;
    bool classwise_norm = true;
    std::size_t cgil_epoch_divisor = 4;

    // Classifier.
    std::size_t samples_per_class = 500;
    double clf_beta = 0.05;
    std::size_t clf_epochs = 30;
    std::size_t clf_batch = 128;
    double clf_lr = 1e-3;
    bool resample = false;
    bool warm_start = false;
    AdaptMode adapt = AdaptMode::per_task;
    bool aia_task_mean = false;

    // Diagnostics.
    std::size_t drift_samples = 256;

    std::vector<std::uint64_t> seeds = {0, 1, 2};

    // Throws with the offending field on invalid values or combinations.
    void validate() const;
    // Every field as (key, value) in a fixed order; parse(to_pairs()) round-trips.
    std::vector<std::pair<std::string, std::string>> to_pairs() const;
    std::string to_text() const;

    void set(const std::string& key, const std::string& value);
};

ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
// Applies INCVAE_<KEY> variables from the environment; returns the keys changed.
std::vector<std::string> apply_env_overrides(ExperimentConfig& config);

std::string to_string(PriorInit p);
PriorInit prior_init_from_string(std::string_view s);
std::string to_string(AdaptMode m);

}  // namespace incvae

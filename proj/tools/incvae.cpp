// Command-line front end: synthetic data, training runs, ablation grids,
// checkpoint diagnostics and classifier re-evaluation.

#include "incvae/config.hpp"
#include "incvae/dataio.hpp"
#include "incvae/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace incvae;

namespace {

ExperimentConfig build_config(const std::string& path, const std::vector<std::string>& sets) {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
    apply_env_overrides(cfg);
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw Error("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw Error("cannot write " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Replay-free class-incremental learning with conditional VAEs over feature vectors"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "out";
    bool verbose = false;

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic cluster feature file");
    std::size_t g_classes = 20, g_dim = 64, g_per_class = 250;
    double g_spread = 0.35;
    std::uint64_t g_seed = 7;
    std::string g_out;
    gen->add_option("--classes", g_classes, "Number of classes")->capture_default_str();
    gen->add_option("--dim", g_dim, "Feature dimension")->capture_default_str();
    gen->add_option("--per-class", g_per_class, "Records per class")->capture_default_str();
    gen->add_option("--spread", g_spread, "Within-class standard deviation")->capture_default_str();
    gen->add_option("--seed", g_seed, "Seed")->capture_default_str();
    gen->add_option("-o,--out", g_out, "Output file (.csv for text, binary otherwise)")->required();

    auto* train = app.add_subcommand("train", "Run one configuration over its seeds");
    bool checkpoints = false;
    train->add_option("-c,--config", config_path, "Config file (key = value)");
    train->add_option("-s,--set", sets, "Override a config key (key=value), repeatable");
    train->add_option("-o,--out", out_dir, "Output directory")->capture_default_str();
    train->add_flag("--checkpoints", checkpoints, "Write a checkpoint after every task");
    train->add_flag("-v,--verbose", verbose, "Progress on stderr");

    auto* ablate = app.add_subcommand("ablate", "Run the standard ablation grid around a base config");
    std::vector<std::string> only;
    ablate->add_option("-c,--config", config_path, "Base config file");
    ablate->add_option("-s,--set", sets, "Override a base config key (key=value), repeatable");
    ablate->add_option("-o,--out", out_dir, "Output directory")->capture_default_str();
    ablate->add_option("--only", only, "Run only the named grid rows");
    ablate->add_flag("-v,--verbose", verbose, "Progress on stderr");

    auto* diag = app.add_subcommand("diagnose", "Drift, R table, separation and PCA from checkpoints");
    std::vector<std::string> ckpts;
    std::size_t d_samples = 256;
    std::uint64_t d_seed = 0;
    diag->add_option("checkpoints", ckpts, "Checkpoint files, or one directory of task_*.ckpt")->required();
    diag->add_option("-o,--out", out_dir, "Output directory")->capture_default_str();
    diag->add_option("--samples", d_samples, "Prior samples for drift")->capture_default_str();
    diag->add_option("--seed", d_seed, "Sampling seed")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "Refit and evaluate the classifier from one checkpoint");
    std::string e_ckpt;
    std::uint64_t e_seed = 0;
    eval->add_option("-c,--config", config_path, "Config file describing the data");
    eval->add_option("-s,--set", sets, "Override a config key (key=value), repeatable");
    eval->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
    eval->add_option("--seed", e_seed, "Classifier seed")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto s = synth_clusters(g_classes, g_dim, g_per_class, g_spread, g_seed);
            write_feature_dataset(g_out, s.data, format_from_path(g_out));
            std::cout << "wrote " << s.data.size() << " records of dimension " << s.data.dim() << " to " << g_out
                      << "\n";
        } else if (*train) {
            const auto cfg = build_config(config_path, sets);
            RunOptions opt;
            opt.verbose = verbose;
            if (checkpoints) opt.checkpoint_dir = fs::path(out_dir) / "checkpoints";
            const auto report = run_experiment(cfg, opt);
            write_report(report, out_dir);
            write_file(fs::path(out_dir) / "config.txt", cfg.to_text());
            std::cout << to_string(cfg.variant) << ": FAA " << report.faa_mean << " +- " << report.faa_std;
            if (report.aia_mean) std::cout << ", AIA " << *report.aia_mean << " +- " << *report.aia_std;
            std::cout << ", memory " << report.memory_total << "\n";
        } else if (*ablate) {
            const auto base = build_config(config_path, sets);
            auto grid = standard_grid(base);
            if (!only.empty()) {
                std::erase_if(grid, [&](const auto& row) {
                    return std::find(only.begin(), only.end(), row.first) == only.end();
                });
                if (grid.empty()) throw Error("--only matched no grid rows");
            }
            RunOptions opt;
            opt.verbose = verbose;
            const auto rows = run_ablation(grid, opt);
            fs::create_directories(out_dir);
            for (const auto& r : rows) write_report(r.report, fs::path(out_dir) / r.name);
            const auto table = ablation_csv(rows);
            write_file(fs::path(out_dir) / "ablation.csv", table);
            std::cout << table;
        } else if (*diag) {
            std::vector<fs::path> paths;
            if (ckpts.size() == 1 && fs::is_directory(ckpts.front())) {
                for (const auto& e : fs::directory_iterator(ckpts.front()))
                    if (e.path().extension() == ".ckpt") paths.push_back(e.path());
            } else {
                paths.assign(ckpts.begin(), ckpts.end());
            }
            std::vector<Checkpoint> loaded;
            for (const auto& p : paths) loaded.push_back(load_checkpoint(p));
            std::sort(loaded.begin(), loaded.end(), [](const auto& a, const auto& b) { return a.task < b.task; });
            const auto d = diagnose(loaded, d_samples, d_seed);
            write_diagnostics(d, out_dir);
            for (std::size_t k = 0; k < d.drift_from_first.size(); ++k)
                std::cout << "checkpoint " << k + 2 << ": drift " << d.drift_consecutive[k] << " (from first "
                          << d.drift_from_first[k] << ")\n";
        } else if (*eval) {
            const auto cfg = build_config(config_path, sets);
            const auto ck = load_checkpoint(e_ckpt);
            const auto row = evaluate_checkpoint(cfg, ck, e_seed);
            for (std::size_t i = 0; i < row.size(); ++i) std::cout << "task " << i + 1 << ": " << row[i] << "\n";
        }
    } catch (const PhaseError& e) {
        std::cerr << "error [" << e.phase() << ", task " << e.task() << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error [" << app.get_subcommands().front()->get_name() << "]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

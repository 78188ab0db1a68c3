#include "incvae/pipeline.hpp"

#include "incvae/binio.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace incvae {

using ordered_json = nlohmann::ordered_json;

PhaseError::PhaseError(std::size_t task, std::string phase, const std::string& what)
    : Error("task " + std::to_string(task) + ", phase " + phase + ": " + what), task_(task), phase_(std::move(phase)) {}

namespace {

// Runs f, tagging any failure with the task and phase and adding the elapsed
// time to `seconds[phase]`.
template <typename F>
auto in_phase(std::size_t task, const std::string& phase, std::map<std::string, double>& seconds, F&& f) {
    const auto start = std::chrono::steady_clock::now();
    struct Timer {
        std::chrono::steady_clock::time_point start;
        double& slot;
        ~Timer() { slot += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); }
    } timer{start, seconds[phase]};
    try {
        return f();
    } catch (const PhaseError&) {
        throw;
    } catch (const std::exception& e) {
        throw PhaseError(task + 1, phase, e.what());
    }
}

std::vector<ClassId> seen_classes(const TaskSchedule& schedule, std::size_t t) {
    std::vector<ClassId> out;
    for (std::size_t i = 0; i <= t; ++i) out.insert(out.end(), schedule[i].begin(), schedule[i].end());
    std::sort(out.begin(), out.end());
    return out;
}

Dataset generate_replay(const VaeModel& model, const PriorBank& bank, const ClasswiseStats* stats,
                        const std::vector<ClassId>& classes, std::size_t per_class, std::uint64_t seed) {
    std::vector<Dataset> parts;
    parts.reserve(classes.size());
    for (auto y : classes) parts.push_back(generate(model, bank, stats, y, per_class, derive_seed(seed, y)));
    return concat(parts);
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
    TrainConfig t;
    t.epochs = c.epochs;
    t.batch_size = c.batch_size;
    t.lr = c.lr;
    t.lr_ortho = c.lr_ortho;
    t.kappa = c.kappa;
    t.frozen_decoder = c.frozen_decoder;
    t.projection_stage = c.projection_stage;
    t.cgil_epoch_divisor = c.cgil_epoch_divisor;
    t.seed = derive_seed(seed, 0x7261);
    return t;
}

ClassifierConfig classifier_config(const ExperimentConfig& c) {
    ClassifierConfig k;
    k.beta = c.clf_beta;
    k.epochs = c.clf_epochs;
    k.batch_size = c.clf_batch;
    k.lr = c.clf_lr;
    k.samples_per_class = c.samples_per_class;
    k.resample = c.resample;
    return k;
}

// Fits a fresh classifier on features generated (or, for the upper bound,
// stored) for `classes`.
FitStats adapt_classifier(CosineClassifier& clf, const ExperimentConfig& config, const VaeModel& model,
                          const PriorBank& bank, const ClasswiseStats* stats, const std::vector<ClassId>& classes,
                          const Dataset* stored, std::uint64_t seed) {
    const auto kcfg = classifier_config(config);
    const std::uint64_t gen_seed = derive_seed(seed, 0x6e6);
    TrainingSource source;
    Dataset materialized;
    if (stored != nullptr) {
        source.materialized = stored;
    } else if (config.resample) {
        source.sampler = [&model, &bank, stats](ClassId y, std::size_t n, std::uint64_t s) {
            return generate(model, bank, stats, y, n, s);
        };
        source.classes = classes;
        source.samples_per_class = config.samples_per_class;
    } else {
        materialized = generate_replay(model, bank, stats, classes, config.samples_per_class, gen_seed);
        source.materialized = &materialized;
    }
    return fit(clf, classes, source, kcfg, derive_seed(seed, 0xc1f), config.warm_start);
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config) {
    Dataset all;
    if (!config.data_path.empty()) {
        all = load_feature_dataset(config.data_path, format_from_path(config.data_path));
    } else {
        all = synth_clusters(config.synth_classes, config.synth_dim, config.synth_per_class, config.synth_spread,
                             config.data_seed)
                  .data;
    }
    const auto classes = all.classes();
    PreparedData out;
    out.schedule = config.task_sizes.empty() ? uniform_schedule(classes, config.n_tasks)
                                             : schedule_from_sizes(classes, config.task_sizes);
    const auto split = split_holdout(all, config.test_fraction, config.data_seed);
    out.train = split_tasks(split.train, out.schedule).tasks;
    out.test = split_tasks(split.test, out.schedule).tasks;
    for (std::size_t t = 0; t < out.test.size(); ++t)
        if (out.test[t].empty()) throw Error("task " + std::to_string(t + 1) + " has an empty test split");
    out.dim = all.dim();
    return out;
}

SeedRun run_seed(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed,
                 const RunOptions& options) {
    config.validate();
    const std::size_t n_tasks = data.train.size();
    SeedRun run;
    run.seed = seed;
    auto& secs = run.seconds;

    const VaeDims dims{static_cast<Eigen::Index>(data.dim), static_cast<Eigen::Index>(config.hidden),
                       static_cast<Eigen::Index>(config.latent), static_cast<Eigen::Index>(config.embed)};
    const bool generative = is_generative(config.variant);
    VaeModel model(config.variant, dims, derive_seed(seed, 0x30de1));
    PriorBank bank(dims.latent);
    std::optional<ClasswiseStats> stats;
    if (config.classwise_norm && generative) stats.emplace();
    std::optional<NullSpaceState> ns;
    if (config.nullspace) ns.emplace(model.projected_input_dims(), config.a, config.eps_eig);
    const auto tcfg = train_config(config, seed);
    FpiConfig fcfg;
    fcfg.lambda = config.lambda;
    fcfg.eps_conv = config.eps_conv;
    fcfg.max_iter = config.max_iter;
    Rng prior_rng(derive_seed(seed, 0x9e1));

    CosineClassifier clf(static_cast<Eigen::Index>(data.dim), config.clf_beta);
    std::vector<Dataset> stored;
    std::optional<VaeModel> after_first;
    std::vector<ClassId> first_classes;
    run.accuracy.test_sizes.clear();
    for (const auto& t : data.test) run.accuracy.test_sizes.push_back(t.size());
    run.accuracy.rows.assign(n_tasks, {});

    for (std::size_t t = 0; t < n_tasks; ++t) {
        const Dataset& task = data.train[t];
        const auto& classes = data.schedule[t];
        const auto task_id = static_cast<TaskId>(t);
        TaskRecord rec;
        rec.classes = classes;

        const Matrix x = in_phase(t, "normalize", secs, [&] {
            if (task.empty()) throw Error("task has no training records");
            if (!stats) return task.features;
            stats->update(task);
            return stats->normalize_rows(task.features, task.labels);
        });

        if (generative) {
            in_phase(t, "prior", secs, [&] {
                const PriorBank before = bank;
                if (!uses_multi_gaussian_prior(config.variant)) {
                    init_means_random(bank, classes, PriorInit::zero, prior_rng);
                } else if (config.prior_init == PriorInit::fpi) {
                    add_embeddings(model, classes, prior_rng);
                    const auto anchors = class_anchors(model, x, task.labels);
                    init_means(bank, anchors);
                    const auto trace = run_fpi(bank, anchors, fcfg);
                    rec.fpi_iterations = trace.iterations;
                    rec.fpi_converged = trace.converged;
                    rec.fpi_displacements = trace.displacements;
                    if (!trace.converged)
                        std::cerr << "warning: fpi did not converge within " << fcfg.max_iter << " iterations (task "
                                  << t + 1 << ")\n";
                } else {
                    init_means_random(bank, classes, config.prior_init, prior_rng);
                }
                for (auto y : before.frozen_classes()) {
                    const Vector& a = before.mean(y);
                    const Vector& b = bank.mean(y);
                    if (!bank.is_frozen(y) || std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0)
                        rec.frozen_means_unchanged = false;
                }
                if (uses_multi_gaussian_prior(config.variant) && bank.size() >= 2)
                    rec.separation = separation_report(bank);
            });

            const auto tstats = in_phase(t, "train", secs, [&] {
                return train_task(model, x, task.labels, bank, task_id, ns ? &*ns : nullptr, tcfg);
            });
            if (!tstats.epoch_total.empty()) rec.final_vae_loss = tstats.epoch_total.back();

            if (ns) {
                in_phase(t, "nullspace", secs, [&] {
                    const auto inputs = collect_decoder_inputs(model, x, task.labels, bank, task_id, config.cov_passes,
                                                               derive_seed(seed, t, 0xc0));
                    for (std::size_t l = 0; l < inputs.size(); ++l) {
                        ns->accumulate(l, inputs[l]);
                        ns->compute_projector(l);
                        rec.nullspace.push_back(ns->diagnostics(l));
                    }
                });
            }
            bank.freeze_all();

            in_phase(t, "drift", secs, [&] {
                if (t == 0) {
                    after_first = model;
                    first_classes = classes;
                } else {
                    rec.drift = decoder_drift(*after_first, model, bank, first_classes, config.drift_samples,
                                              derive_seed(seed, 0xd1f7));
                }
            });
        } else {
            stored.push_back(task);
        }

        if (!options.checkpoint_dir.empty() && generative) {
            in_phase(t, "checkpoint", secs, [&] {
                Checkpoint ck{t, model, bank, ns, stats};
                std::filesystem::create_directories(options.checkpoint_dir);
                save_checkpoint(ck, options.checkpoint_dir / ("task_" + std::to_string(t + 1) + ".ckpt"));
            });
        }

        if (config.adapt == AdaptMode::per_task || t + 1 == n_tasks) {
            const auto seen = seen_classes(data.schedule, t);
            Dataset real;
            if (!generative) real = concat(stored);
            const auto fstats = in_phase(t, "classifier", secs, [&] {
                return adapt_classifier(clf, config, model, bank, stats ? &*stats : nullptr, seen,
                                        generative ? nullptr : &real, derive_seed(seed, t, 0xada));
            });
            rec.classifier_train_accuracy = fstats.train_accuracy;
            run.accuracy.rows[t] = in_phase(t, "evaluate", secs, [&] { return evaluate(clf, data.test, t); });
        }

        if (options.verbose) {
            std::cerr << "seed " << seed << " task " << t + 1 << "/" << n_tasks;
            if (!run.accuracy.rows[t].empty()) {
                const auto& r = run.accuracy.rows[t];
                std::cerr << " mean acc " << std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
            }
            if (rec.drift) std::cerr << " drift " << *rec.drift;
            std::cerr << "\n";
        }
        if (options.on_task_end)
            options.on_task_end(TaskState{t, model, bank, ns ? &*ns : nullptr, stats ? &*stats : nullptr, &clf});
        run.tasks.push_back(std::move(rec));
    }

    const auto& last = run.accuracy.rows.back();
    run.faa = std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(last.size());
    if (run.accuracy.complete()) {
        run.faa = faa(run.accuracy);
        run.aia = avg_incremental_accuracy(run.accuracy, config.aia_task_mean);
    }
    std::size_t n_stored = 0;
    for (const auto& s : stored) n_stored += s.size();
    run.memory = memory_account(model, bank, stats ? &*stats : nullptr, clf, n_stored);
    return run;
}

RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    std::map<std::string, double> prep_secs;
    const auto data = in_phase(0, "data", prep_secs, [&] { return prepare_data(config); });
    RunReport rep;
    rep.config = config;
    for (auto seed : config.seeds) {
        RunOptions o = options;
        if (!o.checkpoint_dir.empty()) o.checkpoint_dir /= "seed_" + std::to_string(seed);
        rep.runs.push_back(run_seed(config, data, seed, o));
        rep.runs.back().seconds["data"] += prep_secs["data"] / static_cast<double>(config.seeds.size());
    }
    std::vector<double> faas;
    std::vector<double> aias;
    std::vector<double> props;
    for (const auto& r : rep.runs) {
        faas.push_back(r.faa);
        if (r.aia) aias.push_back(*r.aia);
        for (const auto& t : r.tasks)
            for (const auto& d : t.nullspace) props.push_back(d.proportion);
    }
    rep.faa_mean = mean_of(faas);
    rep.faa_std = std_of(faas);
    if (aias.size() == rep.runs.size()) {
        rep.aia_mean = mean_of(aias);
        rep.aia_std = std_of(aias);
    }
    if (!props.empty()) rep.mean_proportion = mean_of(props);
    rep.memory_total = rep.runs.front().memory.analytic_total;
    rep.memory_per_class = rep.runs.front().memory.per_class;
    rep.memory_enumerated = rep.runs.front().memory.enumerated_total;
    return rep;
}

namespace {

ordered_json opt_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ordered_json separation_json(const std::optional<SeparationReport>& s) {
    if (!s) return nullptr;
    ordered_json nn = ordered_json::object();
    for (const auto& [y, d] : s->nearest_neighbor) nn[std::to_string(y)] = d;
    return {{"min_distance", s->min_distance}, {"mean_distance", s->mean_distance}, {"nearest_neighbor", nn}};
}

}  // namespace

std::string report_json(const RunReport& report) {
    ordered_json j;
    j["variant"] = to_string(report.config.variant);
    j["seeds"] = report.config.seeds;
    // Entry-wise mean over seeds; empty rows stay empty.
    std::vector<std::vector<double>> mean_matrix;
    const auto& first = report.runs.front().accuracy.rows;
    for (std::size_t t = 0; t < first.size(); ++t) {
        std::vector<double> row(first[t].size(), 0.0);
        for (const auto& r : report.runs)
            for (std::size_t i = 0; i < row.size(); ++i) row[i] += r.accuracy.rows[t][i];
        for (auto& v : row) v /= static_cast<double>(report.runs.size());
        mean_matrix.push_back(row);
    }
    j["accuracy_matrix"] = mean_matrix;
    j["faa_mean"] = report.faa_mean;
    j["faa_std"] = report.faa_std;
    j["aia_mean"] = opt_json(report.aia_mean);
    j["aia_std"] = opt_json(report.aia_std);
    j["aia_mode"] = report.config.aia_task_mean ? "task_mean" : "pooled";
    j["memory_total"] = report.memory_total;
    j["memory_per_class"] = report.memory_per_class;
    j["memory_enumerated"] = report.memory_enumerated;
    j["mean_proportion"] = opt_json(report.mean_proportion);

    ordered_json runs = ordered_json::array();
    for (const auto& r : report.runs) {
        ordered_json jr;
        jr["seed"] = r.seed;
        jr["accuracy_matrix"] = r.accuracy.rows;
        jr["test_sizes"] = r.accuracy.test_sizes;
        jr["faa"] = r.faa;
        jr["aia"] = opt_json(r.aia);
        ordered_json mem;
        mem["analytic_total"] = r.memory.analytic_total;
        mem["enumerated_total"] = r.memory.enumerated_total;
        mem["per_class"] = r.memory.per_class;
        for (const auto& [k, v] : r.memory.breakdown) mem["breakdown"][k] = v;
        jr["memory"] = mem;
        ordered_json tasks = ordered_json::array();
        for (std::size_t t = 0; t < r.tasks.size(); ++t) {
            const auto& rec = r.tasks[t];
            ordered_json jt;
            jt["task"] = t + 1;
            jt["classes"] = rec.classes;
            jt["fpi"] = {{"iterations", rec.fpi_iterations},
                         {"converged", rec.fpi_converged},
                         {"displacements", rec.fpi_displacements}};
            jt["separation"] = separation_json(rec.separation);
            ordered_json ns = ordered_json::array();
            for (const auto& d : rec.nullspace)
                ns.push_back({{"layer", d.layer},
                              {"n", d.count},
                              {"lambda_min", d.lambda_min},
                              {"lambda_max", d.lambda_max},
                              {"selected", d.selected},
                              {"R", d.proportion}});
            jt["nullspace"] = ns;
            jt["drift"] = opt_json(rec.drift);
            jt["frozen_means_unchanged"] = rec.frozen_means_unchanged;
            jt["final_vae_loss"] = rec.final_vae_loss;
            jt["classifier_train_accuracy"] = rec.classifier_train_accuracy;
            tasks.push_back(jt);
        }
        jr["tasks"] = tasks;
        runs.push_back(jr);
    }
    j["runs"] = runs;
    ordered_json cfg;
    for (const auto& [k, v] : report.config.to_pairs()) cfg[k] = v;
    j["config"] = cfg;
    return j.dump(2) + "\n";
}

std::string timings_json(const RunReport& report) {
    ordered_json j = ordered_json::array();
    for (const auto& r : report.runs) {
        ordered_json s;
        for (const auto& [k, v] : r.seconds) s[k] = v;
        j.push_back({{"seed", r.seed}, {"seconds", s}});
    }
    return j.dump(2) + "\n";
}

std::string accuracy_csv(const RunReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "seed,after_task,task,accuracy\n";
    for (const auto& r : report.runs)
        for (std::size_t t = 0; t < r.accuracy.rows.size(); ++t)
            for (std::size_t i = 0; i < r.accuracy.rows[t].size(); ++i)
                os << r.seed << ',' << t + 1 << ',' << i + 1 << ',' << r.accuracy.rows[t][i] << '\n';
    return os.str();
}

std::string nullspace_csv(const RunReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "seed,task,layer_id,n_l,lambda_min,lambda_max,selected,R\n";
    for (const auto& r : report.runs)
        for (std::size_t t = 0; t < r.tasks.size(); ++t)
            for (const auto& d : r.tasks[t].nullspace)
                os << r.seed << ',' << t + 1 << ',' << d.layer << ',' << d.count << ',' << d.lambda_min << ','
                   << d.lambda_max << ',' << d.selected << ',' << d.proportion << '\n';
    return os.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

void write_report(const RunReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "report.json", report_json(report));
    write_text(dir / "timings.json", timings_json(report));
    write_text(dir / "accuracy.csv", accuracy_csv(report));
    write_text(dir / "nullspace.csv", nullspace_csv(report));
}

std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, ExperimentConfig>>& grid,
                                      const RunOptions& options) {
    if (grid.empty()) return {};
    const auto& ref = grid.front().second;
    const std::vector<std::string> shared = {"data_path",  "synth_classes", "synth_dim", "synth_per_class",
                                             "synth_spread", "data_seed",   "test_fraction", "n_tasks",
                                             "task_sizes", "seeds"};
    const auto ref_pairs = ref.to_pairs();
    for (const auto& [name, cfg] : grid) {
        const auto pairs = cfg.to_pairs();
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (std::find(shared.begin(), shared.end(), pairs[i].first) != shared.end() &&
                pairs[i].second != ref_pairs[i].second)
                throw Error("ablation: configuration '" + name + "' differs in shared setting '" + pairs[i].first + "'");
    }
    std::vector<AblationRow> rows;
    for (const auto& [name, cfg] : grid) {
        RunOptions o = options;
        if (!o.checkpoint_dir.empty()) o.checkpoint_dir /= name;
        try {
            rows.push_back({name, cfg, run_experiment(cfg, o)});
        } catch (const std::exception& e) {
            throw Error("ablation row '" + name + "': " + e.what());
        }
        if (options.verbose) std::cerr << name << ": FAA " << rows.back().report.faa_mean << "\n";
    }
    return rows;
}

std::vector<std::pair<std::string, ExperimentConfig>> standard_grid(const ExperimentConfig& base) {
    std::vector<std::pair<std::string, ExperimentConfig>> grid;
    auto add = [&](const std::string& name, Variant v, bool frozen, bool null_space, PriorInit init) {
        ExperimentConfig c = base;
        c.variant = v;
        c.frozen_decoder = frozen;
        c.nullspace = null_space;
        c.prior_init = v == Variant::ceo ? PriorInit::fpi : init;
        grid.emplace_back(name, c);
    };
    for (auto v : {Variant::ceo, Variant::fo}) {
        const auto n = to_string(v);
        add(n + "_frozen", v, true, false, PriorInit::fpi);
        add(n + "_retrained", v, false, false, PriorInit::fpi);
        add(n + "_nullspace", v, false, true, PriorInit::fpi);
    }
    add("fod_nullspace", Variant::fod, false, true, PriorInit::fpi);
    add("fodce_nullspace", Variant::fodce, false, true, PriorInit::fpi);
    add("cgil", Variant::cgil_per_class, false, false, PriorInit::fpi);
    add("upper", Variant::upper_bound, false, false, PriorInit::fpi);
    add("fo_nullspace_normal", Variant::fo, false, true, PriorInit::normal);
    add("fo_nullspace_uniform", Variant::fo, false, true, PriorInit::uniform);
    return grid;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os.precision(6);
    os << "name,variant,faa_mean,faa_std,aia_mean,memory_total,memory_per_class,mean_R\n";
    for (const auto& r : rows) {
        os << r.name << ',' << to_string(r.config.variant) << ',' << r.report.faa_mean << ',' << r.report.faa_std << ',';
        if (r.report.aia_mean) os << *r.report.aia_mean;
        os << ',' << r.report.memory_total << ',' << r.report.memory_per_class << ',';
        if (r.report.mean_proportion) os << *r.report.mean_proportion;
        os << '\n';
    }
    return os.str();
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    binio::Writer w(out);
    w.magic("CKP1");
    w.u32(1);
    w.u64(ckpt.task);
    ckpt.bank.save(out);
    ckpt.model.save(out, ckpt.bank.content_hash());
    w.u32(ckpt.nullspace ? 1U : 0U);
    if (ckpt.nullspace) ckpt.nullspace->save(out);
    w.u32(ckpt.stats ? 1U : 0U);
    if (ckpt.stats) {
        w.f64(ckpt.stats->std_floor());
        w.u32(static_cast<std::uint32_t>(ckpt.stats->size()));
        for (const auto& [y, s] : ckpt.stats->all()) {
            w.u32(y);
            w.matrix_f64(s.mean);
            w.matrix_f64(s.std);
        }
    }
    if (!out) throw Error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    const std::string ctx = path.string();
    binio::Reader r(in, ctx);
    r.expect_magic("CKP1");
    if (const auto v = r.u32(); v != 1) r.fail("unsupported checkpoint version " + std::to_string(v));
    Checkpoint ck;
    ck.task = r.u64();
    ck.bank = PriorBank::load(in, ctx);
    std::uint64_t hash = 0;
    ck.model = VaeModel::load(in, ctx, &hash);
    if (hash != ck.bank.content_hash()) r.fail("model was saved against a different prior bank");
    if (r.u32() != 0) ck.nullspace = NullSpaceState::load(in, ctx);
    if (r.u32() != 0) {
        ClasswiseStats stats(r.f64());
        const auto n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            const ClassId y = r.u32();
            ClassStats s;
            s.mean = r.matrix_f64();
            s.std = r.matrix_f64();
            stats.insert(y, std::move(s));
        }
        ck.stats = std::move(stats);
    }
    if (!r.at_end()) r.fail("trailing bytes after checkpoint");
    return ck;
}

double decoder_drift(const VaeModel& before, const VaeModel& after, const PriorBank& bank,
                     const std::vector<ClassId>& classes, std::size_t n_samples, std::uint64_t seed) {
    if (classes.empty()) throw Error("drift: no classes");
    Rng rng(seed);
    const std::size_t k = classes.size();
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const auto n = static_cast<Eigen::Index>(n_samples / k + (i < n_samples % k ? 1 : 0));
        if (n == 0) continue;
        Matrix z = standard_normal(n, bank.latent_dim(), rng);
        z.rowwise() += bank.mean(classes[i]).transpose();
        const Matrix a = decode_class(before, z, classes[i]);
        const Matrix b = decode_class(after, z, classes[i]);
        num += (b - a).squaredNorm();
        den += a.squaredNorm();
    }
    if (!(den > 0.0)) throw Error("drift: reference decoder output is zero");
    return std::sqrt(num / den);
}

Diagnostics diagnose(const std::vector<Checkpoint>& ck, std::size_t n_samples, std::uint64_t seed) {
    if (ck.size() < 2) throw Error("diagnose: need at least two checkpoints");
    for (std::size_t k = 1; k < ck.size(); ++k) {
        const auto& a = ck[k - 1];
        const auto& b = ck[k];
        if (a.model.variant != b.model.variant || a.model.dims.input != b.model.dims.input ||
            a.model.dims.latent != b.model.dims.latent || a.model.dims.hidden != b.model.dims.hidden ||
            a.model.seed != b.model.seed)
            throw Error("diagnose: checkpoints " + std::to_string(k) + " and " + std::to_string(k + 1) +
                        " come from different runs");
        if (b.task < a.task) throw Error("diagnose: checkpoints are not ordered by task");
        for (auto y : a.bank.classes())
            if (!b.bank.contains(y) || b.bank.mean(y) != a.bank.mean(y))
                throw Error("diagnose: prior mean of class " + std::to_string(y) + " differs between checkpoints");
    }
    Diagnostics d;
    std::vector<ClassId> first;
    for (const auto& [y, t] : ck.front().model.class_task)
        if (t == ck.front().task) first.push_back(y);
    if (first.empty())
        for (const auto& [y, t] : ck.front().model.class_task) first.push_back(y);
    for (std::size_t k = 1; k < ck.size(); ++k) {
        d.drift_consecutive.push_back(decoder_drift(ck[k - 1].model, ck[k].model, ck[k].bank, first, n_samples, seed));
        d.drift_from_first.push_back(decoder_drift(ck.front().model, ck[k].model, ck[k].bank, first, n_samples, seed));
    }
    for (const auto& c : ck) {
        if (c.nullspace)
            for (std::size_t l = 0; l < c.nullspace->layer_count(); ++l)
                if (c.nullspace->layer(l).has_projector) d.r_table.push_back({c.task, c.nullspace->diagnostics(l)});
        if (uses_multi_gaussian_prior(c.model.variant) && c.bank.size() >= 2)
            d.separation.emplace_back(separation_report(c.bank));
        else
            d.separation.emplace_back(std::nullopt);
    }

    const auto& last = ck.back();
    Rng rng(derive_seed(seed, 0x9ca));
    std::vector<Matrix> parts;
    std::vector<ClassId> labels;
    const auto classes = last.bank.classes();
    const std::size_t per = std::max<std::size_t>(1, n_samples / std::max<std::size_t>(1, classes.size()));
    Eigen::Index rows = 0;
    for (auto y : classes) {
        Matrix z = standard_normal(static_cast<Eigen::Index>(per), last.bank.latent_dim(), rng);
        z.rowwise() += last.bank.mean(y).transpose();
        parts.push_back(decode_class(last.model, z, y));
        labels.insert(labels.end(), per, y);
        rows += parts.back().rows();
    }
    Matrix x(rows, last.model.dims.input);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        x.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    const Matrix centered = x.rowwise() - x.colwise().mean();
    const Matrix cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(1, rows - 1));
    const auto eig = jacobi_eigen(cov);
    const Eigen::Index n = eig.values.size();
    const Matrix proj = centered * eig.vectors.rightCols(std::min<Eigen::Index>(2, n)).rowwise().reverse();
    for (Eigen::Index i = 0; i < rows; ++i)
        d.pca.push_back({labels[static_cast<std::size_t>(i)], proj(i, 0), proj.cols() > 1 ? proj(i, 1) : 0.0});
    return d;
}

void write_diagnostics(const Diagnostics& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream drift;
    drift.precision(17);
    drift << "checkpoint,drift_from_previous,drift_from_first\n";
    for (std::size_t k = 0; k < d.drift_consecutive.size(); ++k)
        drift << k + 2 << ',' << d.drift_consecutive[k] << ',' << d.drift_from_first[k] << '\n';
    write_text(dir / "drift.csv", drift.str());

    std::ostringstream r;
    r.precision(17);
    r << "task,layer_id,n_l,lambda_min,lambda_max,selected,R\n";
    for (const auto& row : d.r_table)
        r << row.task + 1 << ',' << row.diag.layer << ',' << row.diag.count << ',' << row.diag.lambda_min << ','
          << row.diag.lambda_max << ',' << row.diag.selected << ',' << row.diag.proportion << '\n';
    write_text(dir / "nullspace.csv", r.str());

    std::ostringstream s;
    s.precision(17);
    s << "checkpoint,min_distance,mean_distance\n";
    for (std::size_t k = 0; k < d.separation.size(); ++k) {
        s << k + 1 << ',';
        if (d.separation[k]) s << d.separation[k]->min_distance << ',' << d.separation[k]->mean_distance;
        else s << ',';
        s << '\n';
    }
    write_text(dir / "separation.csv", s.str());

    std::ostringstream p;
    p.precision(17);
    p << "label,pc1,pc2\n";
    for (const auto& pt : d.pca) p << pt.label << ',' << pt.x << ',' << pt.y << '\n';
    write_text(dir / "pca.csv", p.str());
}

std::vector<double> evaluate_checkpoint(const ExperimentConfig& config, const Checkpoint& ckpt, std::uint64_t seed) {
    const auto data = prepare_data(config);
    if (ckpt.task >= data.schedule.size()) throw Error("eval: checkpoint task is beyond the configured schedule");
    if (!is_generative(ckpt.model.variant)) throw Error("eval: checkpoint holds no generative model");
    if (ckpt.model.dims.input != static_cast<Eigen::Index>(data.dim))
        throw Error("eval: checkpoint feature dimension does not match the data");
    const auto seen = seen_classes(data.schedule, ckpt.task);
    CosineClassifier clf(static_cast<Eigen::Index>(data.dim), config.clf_beta);
    adapt_classifier(clf, config, ckpt.model, ckpt.bank, ckpt.stats ? &*ckpt.stats : nullptr, seen, nullptr,
                     derive_seed(seed, ckpt.task, 0xada));
    return evaluate(clf, data.test, ckpt.task);
}

}  // namespace incvae

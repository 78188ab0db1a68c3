#include "incvae/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace incvae {

std::string to_string(PriorInit p) {
    switch (p) {
        case PriorInit::fpi: return "fpi";
        case PriorInit::normal: return "normal";
        case PriorInit::uniform: return "uniform";
        case PriorInit::zero: return "zero";
    }
    return "?";
}

PriorInit prior_init_from_string(std::string_view s) {
    if (s == "fpi") return PriorInit::fpi;
    if (s == "normal") return PriorInit::normal;
    if (s == "uniform") return PriorInit::uniform;
    if (s == "zero") return PriorInit::zero;
    throw Error("unknown prior init '" + std::string(s) + "' (expected fpi, normal, uniform, zero)");
}

std::string to_string(AdaptMode m) { return m == AdaptMode::per_task ? "per_task" : "final"; }

namespace {

AdaptMode adapt_from_string(std::string_view s) {
    if (s == "per_task") return AdaptMode::per_task;
    if (s == "final") return AdaptMode::final_only;
    throw Error("unknown adapt mode '" + std::string(s) + "' (expected per_task, final)");
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || p != end) throw Error("config key '" + key + "': cannot parse '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_number<T>(key, item));
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    const std::string& v = value;
    if (key == "variant") variant = variant_from_string(v);
    else if (key == "data_path") data_path = v;
    else if (key == "synth_classes") synth_classes = parse_number<std::size_t>(key, v);
    else if (key == "synth_dim") synth_dim = parse_number<std::size_t>(key, v);
    else if (key == "synth_per_class") synth_per_class = parse_number<std::size_t>(key, v);
    else if (key == "synth_spread") synth_spread = parse_number<double>(key, v);
    else if (key == "data_seed") data_seed = parse_number<std::uint64_t>(key, v);
    else if (key == "test_fraction") test_fraction = parse_number<double>(key, v);
    else if (key == "n_tasks") n_tasks = parse_number<std::size_t>(key, v);
    else if (key == "task_sizes") task_sizes = parse_list<std::size_t>(key, v);
    else if (key == "prior_init") prior_init = prior_init_from_string(v);
    else if (key == "lambda") lambda = parse_number<double>(key, v);
    else if (key == "eps_conv") eps_conv = parse_number<double>(key, v);
    else if (key == "max_iter") max_iter = parse_number<std::size_t>(key, v);
    else if (key == "nullspace") nullspace = parse_bool(key, v);
    else if (key == "a") a = parse_number<double>(key, v);
    else if (key == "eps_eig") eps_eig = parse_number<double>(key, v);
    else if (key == "cov_passes") cov_passes = parse_number<std::size_t>(key, v);
    else if (key == "projection_stage") projection_stage = projection_stage_from_string(v);
    else if (key == "hidden") hidden = parse_number<std::size_t>(key, v);
    else if (key == "latent") latent = parse_number<std::size_t>(key, v);
    else if (key == "embed") embed = parse_number<std::size_t>(key, v);
    else if (key == "epochs") epochs = parse_number<std::size_t>(key, v);
    else if (key == "batch_size") batch_size = parse_number<std::size_t>(key, v);
    else if (key == "lr") lr = parse_number<double>(key, v);
    else if (key == "lr_ortho") lr_ortho = parse_number<double>(key, v);
    else if (key == "kappa") kappa = parse_number<double>(key, v);
    else if (key == "frozen_decoder") frozen_decoder = parse_bool(key, v);
    else if (key == "classwise_norm") classwise_norm = parse_bool(key, v);
    else if (key == "cgil_epoch_divisor") cgil_epoch_divisor = parse_number<std::size_t>(key, v);
    else if (key == "samples_per_class") samples_per_class = parse_number<std::size_t>(key, v);
    else if (key == "clf_beta") clf_beta = parse_number<double>(key, v);
    else if (key == "clf_epochs") clf_epochs = parse_number<std::size_t>(key, v);
    else if (key == "clf_batch") clf_batch = parse_number<std::size_t>(key, v);
    else if (key == "clf_lr") clf_lr = parse_number<double>(key, v);
    else if (key == "resample") resample = parse_bool(key, v);
    else if (key == "warm_start") warm_start = parse_bool(key, v);
    else if (key == "adapt") adapt = adapt_from_string(v);
    else if (key == "aia_task_mean") aia_task_mean = parse_bool(key, v);
    else if (key == "drift_samples") drift_samples = parse_number<std::size_t>(key, v);
    else if (key == "seeds") seeds = parse_list<std::uint64_t>(key, v);
    else throw Error("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::to_pairs() const {
    auto b = [](bool x) { return std::string(x ? "true" : "false"); };
    return {
        {"variant", to_string(variant)},
        {"data_path", data_path},
        {"synth_classes", std::to_string(synth_classes)},
        {"synth_dim", std::to_string(synth_dim)},
        {"synth_per_class", std::to_string(synth_per_class)},
        {"synth_spread", fmt_double(synth_spread)},
        {"data_seed", std::to_string(data_seed)},
        {"test_fraction", fmt_double(test_fraction)},
        {"n_tasks", std::to_string(n_tasks)},
        {"task_sizes", join(task_sizes)},
        {"prior_init", to_string(prior_init)},
        {"lambda", fmt_double(lambda)},
        {"eps_conv", fmt_double(eps_conv)},
        {"max_iter", std::to_string(max_iter)},
        {"nullspace", b(nullspace)},
        {"a", fmt_double(a)},
        {"eps_eig", fmt_double(eps_eig)},
        {"cov_passes", std::to_string(cov_passes)},
        {"projection_stage", to_string(projection_stage)},
        {"hidden", std::to_string(hidden)},
        {"latent", std::to_string(latent)},
        {"embed", std::to_string(embed)},
        {"epochs", std::to_string(epochs)},
        {"batch_size", std::to_string(batch_size)},
        {"lr", fmt_double(lr)},
        {"lr_ortho", fmt_double(lr_ortho)},
        {"kappa", fmt_double(kappa)},
        {"frozen_decoder", b(frozen_decoder)},
        {"classwise_norm", b(classwise_norm)},
        {"cgil_epoch_divisor", std::to_string(cgil_epoch_divisor)},
        {"samples_per_class", std::to_string(samples_per_class)},
        {"clf_beta", fmt_double(clf_beta)},
        {"clf_epochs", std::to_string(clf_epochs)},
        {"clf_batch", std::to_string(clf_batch)},
        {"clf_lr", fmt_double(clf_lr)},
        {"resample", b(resample)},
        {"warm_start", b(warm_start)},
        {"adapt", to_string(adapt)},
        {"aia_task_mean", b(aia_task_mean)},
        {"drift_samples", std::to_string(drift_samples)},
        {"seeds", join(seeds)},
    };
}

std::string ExperimentConfig::to_text() const {
    std::string s;
    for (const auto& [k, v] : to_pairs()) s += k + " = " + v + "\n";
    return s;
}

void ExperimentConfig::validate() const {
    auto positive = [](const char* name, double v) {
        if (!(v > 0.0) || !std::isfinite(v)) throw Error(std::string("config: ") + name + " must be > 0");
    };
    auto at_least_one = [](const char* name, std::size_t v) {
        if (v == 0) throw Error(std::string("config: ") + name + " must be >= 1");
    };
    if (data_path.empty()) {
        at_least_one("synth_classes", synth_classes);
        at_least_one("synth_dim", synth_dim);
        if (synth_per_class < 2) throw Error("config: synth_per_class must be >= 2");
        positive("synth_spread", synth_spread);
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error("config: test_fraction must lie in (0, 1)");
    if (task_sizes.empty()) at_least_one("n_tasks", n_tasks);
    for (auto s : task_sizes) at_least_one("task_sizes entry", s);
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("config: lambda must be >= 0");
    positive("eps_conv", eps_conv);
    at_least_one("max_iter", max_iter);
    positive("a", a);
    if (!(eps_eig >= 0.0)) throw Error("config: eps_eig must be >= 0");
    at_least_one("cov_passes", cov_passes);
    at_least_one("hidden", hidden);
    at_least_one("latent", latent);
    at_least_one("embed", embed);
    at_least_one("epochs", epochs);
    at_least_one("batch_size", batch_size);
    positive("lr", lr);
    positive("lr_ortho", lr_ortho);
    positive("kappa", kappa);
    at_least_one("cgil_epoch_divisor", cgil_epoch_divisor);
    at_least_one("samples_per_class", samples_per_class);
    positive("clf_beta", clf_beta);
    at_least_one("clf_epochs", clf_epochs);
    at_least_one("clf_batch", clf_batch);
    positive("clf_lr", clf_lr);
    at_least_one("drift_samples", drift_samples);
    if (seeds.empty()) throw Error("config: seeds must list at least one seed");
    if (frozen_decoder && nullspace)
        throw Error("config: frozen_decoder excludes nullspace (projection implies a retrained decoder)");
    if (frozen_decoder && uses_task_heads(variant))
        throw Error("config: frozen_decoder is not defined for per-task heads (fod, fodce)");
    if ((variant == Variant::cgil_per_class || variant == Variant::upper_bound) && (nullspace || frozen_decoder))
        throw Error("config: nullspace and frozen_decoder apply to shared decoders only (set both false for " +
                    to_string(variant) + ")");
    if (variant == Variant::ceo && prior_init != PriorInit::fpi && prior_init != PriorInit::zero)
        throw Error("config: ceo uses the zero prior; prior_init must be fpi (ignored) or zero");
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        try {
            cfg.set(trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
        } catch (const Error& e) {
            throw Error(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::vector<std::string> apply_env_overrides(ExperimentConfig& config) {
    std::vector<std::string> changed;
    for (const auto& [key, value] : config.to_pairs()) {
        std::string var = "INCVAE_" + key;
        std::transform(var.begin(), var.end(), var.begin(), [](unsigned char c) { return std::toupper(c); });
        if (const char* env = std::getenv(var.c_str()); env != nullptr) {
            try {
                config.set(key, trim(env));
            } catch (const Error& e) {
                throw Error("environment " + var + ": " + e.what());
            }
            changed.push_back(key);
        }
    }
    return changed;
}

}  // namespace incvae

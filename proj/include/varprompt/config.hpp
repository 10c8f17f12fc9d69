#pragma once

// Experiment configuration: defaults, flat `key = value` files, validation and
// the echo format. Every key is also a command-line flag of the same name.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "varprompt/curvature.hpp"
#include "varprompt/decoder.hpp"
#include "varprompt/dist.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/landscapes.hpp"
#include "varprompt/merge.hpp"
#include "varprompt/optim.hpp"
#include "varprompt/rng.hpp"

namespace varprompt {

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"verify-prop1", "scaling",    "prompt-study", "center-seeking",
                                                "ablate-dist",  "merge-eval", "grad-check"};
    return names;
}

inline constexpr const char* kSeedEnv = "VARPROMPT_SEED";

struct ExperimentConfig {
    std::string experiment = "prompt-study";
    std::uint64_t seed = kDefaultSeed;
    std::size_t trials = 10;
    std::size_t jobs = 1;
    std::string out = "results";

    // mask tasks
    std::size_t m = 4;
    std::size_t n = 16;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t features = 8;
    std::string combine = "sum";
    bool shared_task = false;

    // prompt distribution
    std::size_t mc_samples = 10;
    double nu = 5.0;
    std::string family = "student-t";
    bool paper_literal_reparam = false;
    bool zero_noise = false;

    // optimizer and stopping
    std::string optimizer = "sgd";
    double lr = 0.05;
    double weight_decay = 0.0;
    std::string schedule = "constant";
    std::size_t restart_period = 15;
    double min_improvement = 3e-4;
    std::size_t patience = 100;
    std::size_t max_epochs = 20000;
    double init_std = 25.0;

    // analytic landscapes
    std::string landscape = "plateau-ball";
    std::size_t dim = 8;
    double radius = 3.0;
    double sharpness = 10.0;
    double landscape_min_improvement = 1e-6;
    std::size_t landscape_patience = 100;
    std::size_t landscape_max_epochs = 20000;

    // curvature studies
    std::string fn = "quadratic";
    std::size_t fn_dim = 4;
    double sigma = 0.1;
    std::vector<double> sigmas{0.02, 0.05, 0.1, 0.2};
    std::size_t samples = 1000000;
    std::string noise = "gaussian";
    bool antithetic = true;
    bool control_variate = true;
    double fd_step = 1e-4;
    std::size_t probes = 64;

    // merging
    std::string merge = "all";
    std::size_t merge_k = 10;
    double threshold = 0.5;

    std::size_t grad_cases = 130;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

    TrainConfig mask_train() const {
        TrainConfig t;
        t.optimizer.algorithm = parse_algorithm(optimizer);
        t.optimizer.lr = lr;
        t.optimizer.weight_decay = weight_decay;
        t.optimizer.schedule = parse_schedule(schedule);
        t.optimizer.restart_period = restart_period;
        t.min_improvement = min_improvement;
        t.patience = patience;
        t.max_epochs = max_epochs;
        t.init_std = init_std;
        t.mc_samples = mc_samples;
        t.nu = nu;
        t.family = parse_family(family);
        t.zero_noise = zero_noise;
        t.literal_multiplier = paper_literal_reparam;
        return t;
    }

    TrainConfig landscape_train() const {
        TrainConfig t = mask_train();
        t.min_improvement = landscape_min_improvement;
        t.patience = landscape_patience;
        t.max_epochs = landscape_max_epochs;
        return t;
    }

    TaskSpec task_spec(std::uint64_t task_seed) const {
        return TaskSpec{task_seed, m, n, height, width, features, parse_combine(combine)};
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
    auto bad = [&](const std::string& why) { return ConfigError("key '" + key + "': " + why + " (got '" + text + "')"); };
    if constexpr (std::is_same_v<T, std::string>) {
        if (text.empty()) throw bad("empty value");
        return text;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return false;
        throw bad("expected a boolean");
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        std::vector<double> out;
        std::string item;
        std::istringstream is(text);
        while (std::getline(is, item, ',')) {
            auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
            if (a == std::string::npos) throw bad("empty list entry");
            out.push_back(parse_value<double>(key, item.substr(a, b - a + 1)));
        }
        if (out.empty()) throw bad("empty list");
        return out;
    } else {
        T v{};
        const char* first = text.data();
        const char* last = first + text.size();
        if constexpr (std::is_unsigned_v<T>)
            if (!text.empty() && text[0] == '-') throw bad("expected a non-negative integer");
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) throw bad(std::is_floating_point_v<T> ? "expected a number" : "expected an integer");
        return v;
    }
}

template <class T>
std::string show_value(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) return v;
    else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, double>) return format_double(v);
    else if constexpr (std::is_same_v<T, std::vector<double>>) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
        return s;
    } else return std::to_string(v);
}

} // namespace detail

struct ConfigKey {
    std::string name;
    std::string help;
    bool is_flag = false;  // boolean: `--name` alone means true
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

template <class T>
ConfigKey make_key(std::string name, T ExperimentConfig::*field, std::string help) {
    ConfigKey k;
    k.name = name;
    k.help = std::move(help);
    k.is_flag = std::is_same_v<T, bool>;
    k.set = [field, name](ExperimentConfig& c, const std::string& v) { c.*field = parse_value<T>(name, v); };
    k.get = [field](const ExperimentConfig& c) { return show_value(c.*field); };
    return k;
}

} // namespace detail

// Fixed order; the echo lists keys in this order.
inline const std::vector<ConfigKey>& config_keys() {
    using C = ExperimentConfig;
    using detail::make_key;
    static const std::vector<ConfigKey> keys{
        make_key("experiment", &C::experiment, "experiment to run"),
        make_key("seed", &C::seed, "master seed"),
        make_key("trials", &C::trials, "number of trials (tasks for mask studies)"),
        make_key("jobs", &C::jobs, "worker threads"),
        make_key("out", &C::out, "output directory"),
        make_key("m", &C::m, "prompt rows per task"),
        make_key("n", &C::n, "prompt embedding dimension"),
        make_key("height", &C::height, "mask height"),
        make_key("width", &C::width, "mask width"),
        make_key("features", &C::features, "decoder feature channels"),
        make_key("combine", &C::combine, "how prompt rows combine: max or sum"),
        make_key("shared-task", &C::shared_task, "every trial uses the first task"),
        make_key("mc-samples", &C::mc_samples, "Monte Carlo samples K per epoch"),
        make_key("nu", &C::nu, "t degrees of freedom"),
        make_key("family", &C::family, "student-t or gaussian"),
        make_key("paper-literal-reparam", &C::paper_literal_reparam, "use (nu+n)/sqrt(delta) as the t mixing factor"),
        make_key("zero-noise", &C::zero_noise, "clamp sigma to zero"),
        make_key("optimizer", &C::optimizer, "sgd or adamw"),
        make_key("lr", &C::lr, "learning rate"),
        make_key("weight-decay", &C::weight_decay, "decoupled weight decay"),
        make_key("schedule", &C::schedule, "constant or cosine-restart"),
        make_key("restart-period", &C::restart_period, "cosine restart period in epochs"),
        make_key("min-improvement", &C::min_improvement, "stopping threshold for mask studies"),
        make_key("patience", &C::patience, "stopping patience for mask studies"),
        make_key("max-epochs", &C::max_epochs, "epoch cap for mask studies"),
        make_key("init-std", &C::init_std, "std of the random initial prompt"),
        make_key("landscape", &C::landscape, "analytic landscape name"),
        make_key("dim", &C::dim, "landscape dimension"),
        make_key("radius", &C::radius, "basin radius"),
        make_key("sharpness", &C::sharpness, "wall sharpness"),
        make_key("landscape-min-improvement", &C::landscape_min_improvement, "stopping threshold for landscape studies"),
        make_key("landscape-patience", &C::landscape_patience, "stopping patience for landscape studies"),
        make_key("landscape-max-epochs", &C::landscape_max_epochs, "epoch cap for landscape studies"),
        make_key("fn", &C::fn, "registered smooth function"),
        make_key("fn-dim", &C::fn_dim, "smooth function dimension"),
        make_key("sigma", &C::sigma, "noise scale"),
        make_key("sigmas", &C::sigmas, "comma-separated noise scales for the scaling study"),
        make_key("samples", &C::samples, "Monte Carlo noise draws"),
        make_key("noise", &C::noise, "gaussian or uniform-ball"),
        make_key("antithetic", &C::antithetic, "evaluate noise in +/- pairs"),
        make_key("control-variate", &C::control_variate, "subtract the second-order Taylor term in the scaling study"),
        make_key("fd-step", &C::fd_step, "finite-difference step"),
        make_key("probes", &C::probes, "Hutchinson probes (0 disables)"),
        make_key("merge", &C::merge, "merge strategy, or all"),
        make_key("merge-k", &C::merge_k, "samples merged per inference"),
        make_key("threshold", &C::threshold, "probability threshold"),
        make_key("grad-cases", &C::grad_cases, "gradient check cases"),
    };
    return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
    for (auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

inline void set_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(key);
    if (!k) throw ConfigError("unknown key '" + key + "'");
    k->set(c, value);
}

namespace detail {

inline std::string trim(const std::string& s) {
    auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace detail

// Parses `key = value` lines; `#` starts a comment. Later lines win.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": missing key");
        if (!find_key(key)) throw ConfigError("unknown key '" + key + "'");
        out.emplace_back(key, value);
    }
    return out;
}

inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
    for (auto& [k, v] : parse_config_text(text)) set_key(c, k, v);
}

inline void apply_config_file(ExperimentConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(c, ss.str());
}

// Defaults, then VARPROMPT_SEED if set.
inline ExperimentConfig default_config(const char* env_seed = std::getenv(kSeedEnv)) {
    ExperimentConfig c;
    if (env_seed && *env_seed) {
        try {
            c.seed = detail::parse_value<std::uint64_t>("seed", env_seed);
        } catch (const ConfigError&) {
            throw ConfigError(std::string(kSeedEnv) + " must be a non-negative integer, got '" + env_seed + "'");
        }
    }
    return c;
}

inline void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("key '" + key + "': " + why); };
    auto& ex = experiment_names();
    if (std::find(ex.begin(), ex.end(), c.experiment) == ex.end()) fail("experiment", "unknown experiment '" + c.experiment + "'");
    auto positive = [&](const char* key, double v) {
        if (!(v > 0.0) || !std::isfinite(v)) fail(key, "must be positive");
    };
    auto at_least_one = [&](const char* key, std::size_t v) {
        if (v == 0) fail(key, "must be at least 1");
    };
    at_least_one("trials", c.trials);
    at_least_one("jobs", c.jobs);
    if (c.out.empty()) fail("out", "must not be empty");
    at_least_one("m", c.m);
    at_least_one("n", c.n);
    at_least_one("height", c.height);
    at_least_one("width", c.width);
    at_least_one("features", c.features);
    try { parse_combine(c.combine); } catch (const Error& e) { fail("combine", e.what()); }
    at_least_one("mc-samples", c.mc_samples);
    positive("nu", c.nu);
    try { parse_family(c.family); } catch (const Error& e) { fail("family", e.what()); }
    try { parse_algorithm(c.optimizer); } catch (const Error& e) { fail("optimizer", e.what()); }
    positive("lr", c.lr);
    if (!(c.weight_decay >= 0.0)) fail("weight-decay", "must be non-negative");
    try { parse_schedule(c.schedule); } catch (const Error& e) { fail("schedule", e.what()); }
    at_least_one("restart-period", c.restart_period);
    if (!(c.min_improvement >= 0.0)) fail("min-improvement", "must be non-negative");
    at_least_one("patience", c.patience);
    at_least_one("max-epochs", c.max_epochs);
    positive("init-std", c.init_std);
    auto& ln = landscape_names();
    if (std::find(ln.begin(), ln.end(), c.landscape) == ln.end()) fail("landscape", "unknown landscape '" + c.landscape + "'");
    at_least_one("dim", c.dim);
    positive("radius", c.radius);
    positive("sharpness", c.sharpness);
    if (!(c.landscape_min_improvement >= 0.0)) fail("landscape-min-improvement", "must be non-negative");
    at_least_one("landscape-patience", c.landscape_patience);
    at_least_one("landscape-max-epochs", c.landscape_max_epochs);
    auto& fns = smooth_function_names();
    if (std::find(fns.begin(), fns.end(), c.fn) == fns.end()) fail("fn", "unknown function '" + c.fn + "'");
    at_least_one("fn-dim", c.fn_dim);
    positive("sigma", c.sigma);
    for (double s : c.sigmas) positive("sigmas", s);
    if (c.samples < 2) fail("samples", "must be at least 2");
    try { parse_noise(c.noise); } catch (const Error& e) { fail("noise", e.what()); }
    positive("fd-step", c.fd_step);
    if (c.merge != "all") {
        try { parse_merge(c.merge); } catch (const Error& e) { fail("merge", e.what()); }
    }
    at_least_one("merge-k", c.merge_k);
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) fail("threshold", "must lie in (0, 1)");
    at_least_one("grad-cases", c.grad_cases);
}

inline std::string echo(const ExperimentConfig& c) {
    std::string s = "# effective configuration\n";
    for (auto& k : config_keys()) s += k.name + " = " + k.get(c) + "\n";
    return s;
}

// Parses an echo (or any config text) on top of the built-in defaults.
inline ExperimentConfig parse_echo(const std::string& text) {
    ExperimentConfig c;
    apply_config_text(c, text);
    return c;
}

// 64-bit FNV-1a of the echo, without the keys that cannot change results.
inline std::string config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 14695981039346656037ull;
    for (auto& k : config_keys()) {
        if (k.name == "jobs" || k.name == "out") continue;
        std::string line = k.name + "=" + k.get(c) + "\n";
        for (unsigned char ch : line) {
            h ^= ch;
            h *= 1099511628211ull;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace varprompt

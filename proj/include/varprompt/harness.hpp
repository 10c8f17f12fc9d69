#pragma once

// Experiment runners and the output writer behind the `varprompt` CLI.
// Trials are pure functions of (config, trial id); the orchestrator collects
// them in trial order and does all file I/O.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "varprompt/config.hpp"
#include "varprompt/curvature.hpp"
#include "varprompt/decoder.hpp"
#include "varprompt/gradsuite.hpp"
#include "varprompt/landscapes.hpp"
#include "varprompt/merge.hpp"
#include "varprompt/optim.hpp"
#include "varprompt/results.hpp"

namespace varprompt {

inline constexpr std::uint64_t kTaskStream = 0x7A5C;
inline constexpr std::uint64_t kTrialStream = 0x7121A1;
inline constexpr std::uint64_t kMergeStream = 0x3E26E;
inline constexpr std::uint64_t kCurvatureStream = 0xC0FFEE;
inline constexpr std::uint64_t kGradCaseStream = 0x6AD;

// Acceptance thresholds reported in summary.txt.
inline constexpr double kVanillaIouBar = 0.9;
inline constexpr double kVanillaPassFraction = 0.95;
inline constexpr double kParityMargin = 0.02;
inline constexpr double kParityFraction = 0.90;
inline constexpr double kFlatterFraction = 0.80;
inline constexpr double kCloserFraction = 0.90;
inline constexpr double kCenterTolerance = 1e-3;
inline constexpr double kAblationMajority = 0.55;
inline constexpr double kMergeTolerance = 0.02;
inline constexpr double kGradTolerance = 1e-5;
inline constexpr std::size_t kMinGradCases = 100;
inline constexpr double kSlopeBar = 2.5;

enum class VerdictKind { Pass, Fail, Info };

struct Verdict {
    VerdictKind kind = VerdictKind::Info;
    std::string criterion;
    std::string detail;
};

inline Verdict check(bool ok, std::string criterion, std::string detail) {
    return Verdict{ok ? VerdictKind::Pass : VerdictKind::Fail, std::move(criterion), std::move(detail)};
}

inline Verdict info(std::string criterion, std::string detail) {
    return Verdict{VerdictKind::Info, std::move(criterion), std::move(detail)};
}

struct ExperimentResult {
    ResultTable table;
    std::optional<ResultTable> points;  // raw optima plus 2-D PCA coordinates
    std::vector<Verdict> verdicts;
};

// Runs fn(0..count-1) on `jobs` threads and returns results in trial order.
// If trials throw, the exception of the lowest trial id is rethrown.
template <class R, class Fn>
std::vector<R> run_trials(std::size_t count, std::size_t jobs, Fn fn) {
    std::vector<std::optional<R>> slots(count);
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                slots[i].emplace(fn(i));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<R> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

namespace detail {

inline std::string fraction_text(std::size_t k, std::size_t n) {
    std::ostringstream os;
    os << k << "/" << n;
    if (n) os << " (" << std::fixed << std::setprecision(1) << 100.0 * static_cast<double>(k) / static_cast<double>(n) << "%)";
    return os.str();
}

inline std::string num(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

inline double mean_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return t.numel() ? s / static_cast<double>(t.numel()) : NAN;
}

inline double safe_flatness(const ToyTask& task, const Tensor& z) {
    try {
        return flatness_at(task, z);
    } catch (const Error&) {
        return NAN;
    }
}

inline std::uint64_t task_seed(const ExperimentConfig& c, std::size_t trial) {
    return Rng(c.seed, kTaskStream).child(c.shared_task ? 0 : trial).next_u64();
}

inline std::vector<Column> points_columns(std::size_t dim) {
    std::vector<Column> cols{{"trial", "index"}, {"method", "label"}, {"pc1", "embedding"}, {"pc2", "embedding"}};
    for (std::size_t k = 0; k < dim; ++k) cols.push_back({"z" + std::to_string(k), "embedding"});
    return cols;
}

// Points are (trial, method, coordinates) in output order.
inline ResultTable points_table(const std::vector<std::pair<std::size_t, std::string>>& labels,
                                const std::vector<std::vector<double>>& coords, std::size_t dim) {
    ResultTable t;
    t.columns = points_columns(dim);
    std::vector<std::array<double, 2>> pcs(coords.size(), {NAN, NAN});
    bool finite = coords.size() >= 3;
    for (auto& c : coords)
        for (double v : c) finite = finite && std::isfinite(v);
    if (finite) pcs = pca_project(coords).points;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        std::vector<std::string> row{cell(labels[i].first), labels[i].second, cell(pcs[i][0]), cell(pcs[i][1])};
        for (double v : coords[i]) row.push_back(cell(v));
        t.add(std::move(row));
    }
    return t;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Column schemas, fixed per experiment.

inline std::vector<Column> experiment_columns(const std::string& experiment) {
    if (experiment == "verify-prop1")
        return {{"trial", "index"},          {"fn", "label"},
                {"dim", "count"},            {"sigma", "embedding"},
                {"noise", "label"},          {"antithetic", "bool"},
                {"samples", "count"},        {"f0", "loss"},
                {"laplacian_fd", "loss/embedding^2"}, {"laplacian_hutchinson", "loss/embedding^2"},
                {"hutchinson_se", "loss/embedding^2"}, {"noise_gap", "loss"},
                {"noise_gap_se", "loss"},    {"predicted_gap", "loss"},
                {"residual", "loss"},        {"residual_se", "loss"},
                {"residual_in_se", "std-errors"}};
    if (experiment == "scaling")
        return {{"trial", "index"},        {"instance", "index"},     {"fn", "label"},
                {"sigma", "embedding"},    {"samples", "count"},      {"control_variate", "bool"},
                {"laplacian_fd", "loss/embedding^2"}, {"noise_gap", "loss"}, {"predicted_gap", "loss"},
                {"residual", "loss"},      {"residual_se", "loss"},   {"abs_residual", "loss"},
                {"below_floor", "bool"},   {"slope", "log-log"},      {"exact", "bool"}};
    if (experiment == "prompt-study")
        return {{"trial", "index"},        {"task_seed", "seed"},     {"mode", "label"},
                {"status", "label"},       {"epochs", "count"},       {"final_loss", "loss"},
                {"best_loss", "loss"},     {"iou", "ratio"},          {"bce", "loss"},
                {"dice", "loss"},          {"sampled_iou", "ratio"},  {"sigma_mean", "embedding"},
                {"laplacian", "loss/embedding^2"}, {"positive_fraction", "ratio"}};
    if (experiment == "center-seeking")
        return {{"trial", "index"},
                {"landscape", "label"},
                {"vanilla_status", "label"},
                {"variational_status", "label"},
                {"vanilla_epochs", "count"},
                {"variational_epochs", "count"},
                {"vanilla_distance", "embedding"},
                {"variational_distance", "embedding"},
                {"vanilla_margin", "embedding"},
                {"variational_margin", "embedding"},
                {"vanilla_basin", "index"},
                {"variational_basin", "index"},
                {"vanilla_laplacian", "loss/embedding^2"},
                {"variational_laplacian", "loss/embedding^2"},
                {"sigma_mean", "embedding"},
                {"variational_closer", "bool"}};
    if (experiment == "ablate-dist")
        return {{"trial", "index"},          {"landscape", "label"},       {"t_status", "label"},
                {"gaussian_status", "label"}, {"t_epochs", "count"},        {"gaussian_epochs", "count"},
                {"t_distance", "embedding"},  {"gaussian_distance", "embedding"}, {"t_laplacian", "loss/embedding^2"},
                {"gaussian_laplacian", "loss/embedding^2"}, {"t_sigma_mean", "embedding"},
                {"gaussian_sigma_mean", "embedding"}, {"t_not_worse", "bool"}};
    if (experiment == "merge-eval")
        return {{"trial", "index"},      {"task_seed", "seed"},         {"status", "label"},
                {"strategy", "label"},   {"k", "count"},                {"iou", "ratio"},
                {"zero_noise_iou", "ratio"}, {"zero_noise_identical", "bool"}};
    if (experiment == "grad-check")
        return {{"case", "index"}, {"op", "label"}, {"params", "count"}, {"rel_err", "ratio"}, {"passed", "bool"}};
    throw ConfigError("key 'experiment': unknown experiment '" + experiment + "'");
}

// ---------------------------------------------------------------------------

namespace detail {

struct CurvatureInstance {
    SmoothFunction fn;
    std::vector<double> z;
    Rng mc;
};

inline CurvatureInstance curvature_instance(const ExperimentConfig& c, std::size_t trial) {
    Rng base = Rng(c.seed, kCurvatureStream).child(trial);
    CurvatureInstance inst{smooth_function(c.fn, c.fn_dim, base.child(0).next_u64()), std::vector<double>(c.fn_dim),
                           base.child(2)};
    Rng zr = base.child(1);
    for (auto& v : inst.z) v = zr.normal();
    return inst;
}

inline bool is_quadratic_fn(const std::string& fn) { return fn == "quadratic" || fn == "norm-squared"; }

} // namespace detail

inline ExperimentResult run_verify_prop1(const ExperimentConfig& c) {
    Prop1Options opts;
    opts.noise = parse_noise(c.noise);
    opts.antithetic = c.antithetic;
    opts.h = c.fd_step;
    opts.hutchinson_probes = c.probes >= 2 ? c.probes : 0;
    auto reports = run_trials<CurvatureReport>(c.trials, c.jobs, [&](std::size_t t) {
        auto inst = detail::curvature_instance(c, t);
        return verify_prop1(inst.fn.value, inst.z, c.sigma, c.samples, inst.mc, opts, inst.fn.graph);
    });
    ExperimentResult res;
    res.table.columns = experiment_columns("verify-prop1");
    std::size_t within = 0, hutch_ok = 0, hutch_n = 0;
    double scaled = 0.0;
    for (std::size_t t = 0; t < reports.size(); ++t) {
        auto& r = reports[t];
        double lh = r.laplacian_hutchinson ? r.laplacian_hutchinson->value : NAN;
        double lh_se = r.laplacian_hutchinson ? r.laplacian_hutchinson->std_error : NAN;
        res.table.add({cell(t), c.fn, cell(c.fn_dim), cell(c.sigma), c.noise, cell(c.antithetic), cell(c.samples), cell(r.f0),
                       cell(r.laplacian_fd), cell(lh), cell(lh_se), cell(r.noise_gap.value), cell(r.noise_gap.std_error),
                       cell(r.predicted_gap()), cell(r.residual.value), cell(r.residual.std_error), cell(r.residual_in_se())});
        within += r.residual_in_se() < 3.0;
        scaled += std::abs(r.residual.value) / std::pow(c.sigma, 3);
        if (r.laplacian_hutchinson) {
            ++hutch_n;
            hutch_ok += std::abs(lh - r.laplacian_fd) <= 4.0 * lh_se + 1e-6 * std::max(1.0, std::abs(r.laplacian_fd));
        }
    }
    const std::size_t N = reports.size();
    if (detail::is_quadratic_fn(c.fn))
        res.verdicts.push_back(check(within == N, "quadratic-exactness",
                                     detail::fraction_text(within, N) + " residuals within 3 std-errors of zero"));
    else
        res.verdicts.push_back(info("residual-order", "mean |residual| / sigma^3 = " + detail::num(scaled / static_cast<double>(N)) +
                                                          "; " + detail::fraction_text(within, N) + " within 3 std-errors"));
    if (hutch_n)
        res.verdicts.push_back(info("hutchinson-vs-fd", detail::fraction_text(hutch_ok, hutch_n) +
                                                            " Hutchinson traces within 4 std-errors of the FD Laplacian"));
    return res;
}

inline ExperimentResult run_scaling(const ExperimentConfig& c) {
    if (c.sigmas.size() < 4) throw ConfigError("key 'sigmas': need at least 4 values");
    auto [lo, hi] = std::minmax_element(c.sigmas.begin(), c.sigmas.end());
    if (*hi / *lo < 10.0 - 1e-12) throw ConfigError("key 'sigmas': values must span at least one decade");
    Prop1Options opts;
    opts.noise = parse_noise(c.noise);
    opts.h = c.fd_step;
    opts.taylor_control = c.control_variate;
    auto studies = run_trials<ScalingResult>(c.trials, c.jobs, [&](std::size_t t) {
        auto inst = detail::curvature_instance(c, t);
        return scaling_study(inst.fn.value, inst.z, c.sigmas, c.samples, inst.mc, opts);
    });
    ExperimentResult res;
    res.table.columns = experiment_columns("scaling");
    std::size_t row_id = 0, ok = 0;
    std::string slopes;
    for (std::size_t t = 0; t < studies.size(); ++t) {
        auto& s = studies[t];
        double slope = s.slope ? *s.slope : NAN;
        for (auto& r : s.rows)
            res.table.add({cell(row_id++), cell(t), c.fn, cell(r.sigma), cell(c.samples), cell(c.control_variate),
                           cell(r.report.laplacian_fd), cell(r.report.noise_gap.value), cell(r.report.predicted_gap()),
                           cell(r.residual.value), cell(r.residual.std_error), cell(r.abs_residual), cell(r.below_floor),
                           cell(slope), cell(s.exact)});
        bool pass = s.exact || (s.slope && *s.slope >= kSlopeBar);
        ok += pass;
        slopes += (t ? " " : "") + (s.exact ? std::string("floor") : detail::num(slope, 3));
    }
    res.verdicts.push_back(check(ok == studies.size(), "cubic-residual",
                                 detail::fraction_text(ok, studies.size()) +
                                     " instances with log-log slope >= 2.5 or residuals at the noise floor; slopes: " + slopes));
    return res;
}

// ---------------------------------------------------------------------------

struct PromptTrial {
    std::uint64_t task_seed = 0;
    double positive_fraction = 0.0;
    TrialRecord vanilla, variational;
    double vanilla_laplacian = NAN, variational_laplacian = NAN;
};

inline PromptTrial prompt_trial(const ExperimentConfig& c, std::size_t t) {
    PromptTrial p;
    p.task_seed = detail::task_seed(c, t);
    ToyTask task = make_task(c.task_spec(p.task_seed));
    p.positive_fraction = task.positive_fraction();
    Rng rng = Rng(c.seed, kTrialStream).child(t);
    TrainConfig train = c.mask_train();
    p.vanilla = optimize_vanilla(task, rng, train);
    p.variational = optimize_variational(task, rng, train);
    p.vanilla.trial_id = p.variational.trial_id = t;
    p.vanilla_laplacian = detail::safe_flatness(task, p.vanilla.z);
    p.variational_laplacian = detail::safe_flatness(task, p.variational.z);
    return p;
}

inline ExperimentResult run_prompt_study(const ExperimentConfig& c) {
    auto trials = run_trials<PromptTrial>(c.trials, c.jobs, [&](std::size_t t) { return prompt_trial(c, t); });
    ExperimentResult res;
    res.table.columns = experiment_columns("prompt-study");
    std::vector<std::pair<std::size_t, std::string>> labels;
    std::vector<std::vector<double>> coords;
    std::size_t vanilla_ok = 0, parity = 0, flatter = 0, diverged = 0;
    for (std::size_t t = 0; t < trials.size(); ++t) {
        auto& p = trials[t];
        for (const TrialRecord* r : {&p.vanilla, &p.variational}) {
            bool var = r == &p.variational;
            MaskMetrics m = r->metrics.value_or(MaskMetrics{NAN, NAN, NAN});
            double sampled = r->sampled_metrics ? r->sampled_metrics->iou : NAN;
            res.table.add({cell(t), cell(p.task_seed), to_string(r->mode), to_string(r->status), cell(r->epochs_run),
                           cell(r->final_loss()), cell(r->best_loss()), cell(m.iou), cell(m.bce), cell(m.dice), cell(sampled),
                           cell(var ? detail::mean_of(r->sigma) : 0.0),
                           cell(var ? p.variational_laplacian : p.vanilla_laplacian), cell(p.positive_fraction)});
            labels.emplace_back(t, to_string(r->mode));
            coords.push_back(r->z.to_vector());
            diverged += r->status == TrialStatus::Diverged;
        }
        double vi = p.vanilla.metrics->iou, wi = p.variational.metrics->iou;
        vanilla_ok += vi > kVanillaIouBar;
        parity += wi >= vi - kParityMargin;
        flatter += p.variational_laplacian <= p.vanilla_laplacian;
    }
    const std::size_t N = trials.size();
    auto frac = [N](std::size_t k) { return static_cast<double>(k) / static_cast<double>(N); };
    res.verdicts.push_back(check(frac(vanilla_ok) >= kVanillaPassFraction, "vanilla-iou",
                                 detail::fraction_text(vanilla_ok, N) + " vanilla trials reach IoU > 0.9 (need >= 95%)"));
    res.verdicts.push_back(check(frac(parity) >= kParityFraction, "variational-parity",
                                 detail::fraction_text(parity, N) + " tasks with variational IoU >= vanilla IoU - 0.02 (need >= 90%)"));
    res.verdicts.push_back(check(frac(flatter) >= kFlatterFraction, "flatter-minimum",
                                 detail::fraction_text(flatter, N) +
                                     " tasks where the variational mean has the smaller loss Laplacian (need >= 80%)"));
    if (c.shared_task) {
        // Share of (variational, vanilla) pairs across trials where the
        // variational mean prompt is at least as good.
        std::size_t beats = 0;
        for (auto& a : trials)
            for (auto& b : trials) beats += a.variational.metrics->iou >= b.vanilla.metrics->iou;
        res.verdicts.push_back(info("shared-task-rank", detail::fraction_text(beats, N * N) +
                                                            " (variational, vanilla) pairs with variational IoU >= vanilla IoU"));
    }
    res.verdicts.push_back(info("divergences", std::to_string(diverged) + " diverged runs"));
    res.points = detail::points_table(labels, coords, c.m * c.n);
    return res;
}

// ---------------------------------------------------------------------------

inline Landscape configured_landscape(const ExperimentConfig& c) {
    return make_landscape(c.landscape, c.dim, c.radius, c.sharpness, c.seed);
}

inline ExperimentResult run_center_seeking(const ExperimentConfig& c) {
    const Landscape L = configured_landscape(c);
    CenterSeekingConfig cs;
    cs.train = c.landscape_train();
    cs.trials = c.trials;
    auto rows = run_trials<CenterSeekingRow>(c.trials, c.jobs, [&](std::size_t t) {
        return center_seeking_trial(L, t, Rng(c.seed, kTrialStream).child(t), cs);
    });
    ExperimentResult res;
    res.table.columns = experiment_columns("center-seeking");
    std::vector<std::pair<std::size_t, std::string>> labels;
    std::vector<std::vector<double>> coords;
    double worst = 0.0;
    for (auto& r : rows) {
        res.table.add({cell(r.trial), L.name, to_string(r.vanilla.status), to_string(r.variational.status),
                       cell(r.vanilla.epochs_run), cell(r.variational.epochs_run), cell(r.vanilla_distance),
                       cell(r.variational_distance), cell(r.vanilla_margin), cell(r.variational_margin), cell(r.vanilla_basin),
                       cell(r.variational_basin), cell(r.vanilla_laplacian), cell(r.variational_laplacian),
                       cell(detail::mean_of(r.variational.sigma)), cell(r.variational_closer())});
        labels.emplace_back(r.trial, "vanilla");
        coords.push_back(r.vanilla.z.to_vector());
        labels.emplace_back(r.trial, "variational");
        coords.push_back(r.variational.z.to_vector());
        worst = std::max({worst, r.vanilla_distance, r.variational_distance});
        if (!std::isfinite(r.vanilla_distance) || !std::isfinite(r.variational_distance)) worst = INFINITY;
    }
    CenterSeekingSummary s = summarize(std::move(rows));
    const std::size_t N = s.rows.size();
    if (L.family == LandscapeFamily::QuadraticWell) {
        res.verdicts.push_back(check(worst < kCenterTolerance, "both-reach-center",
                                     "largest distance to the center over both learners: " + detail::num(worst, 3) +
                                         " (need < 1e-3)"));
    } else {
        res.verdicts.push_back(check(s.closer_fraction() >= kCloserFraction, "variational-closer",
                                     detail::fraction_text(s.closer, N) +
                                         " trials with the variational mean strictly closer to the center (need >= 90%)"));
    }
    res.verdicts.push_back(info("flatter", detail::fraction_text(s.flatter, N) + " trials with a smaller Laplacian at the variational mean"));
    res.verdicts.push_back(info("mean-distance", "vanilla " + detail::num(s.mean_vanilla_distance) + ", variational " +
                                                     detail::num(s.mean_variational_distance)));
    res.verdicts.push_back(info("divergences", std::to_string(s.divergences) + " diverged runs"));
    res.points = detail::points_table(labels, coords, L.n);
    return res;
}

struct AblationRow {
    TrialRecord t, gaussian;
    double t_distance = NAN, gaussian_distance = NAN;
    double t_laplacian = NAN, gaussian_laplacian = NAN;
};

inline ExperimentResult run_ablate_dist(const ExperimentConfig& c) {
    const Landscape L = configured_landscape(c);
    TrainConfig tc = c.landscape_train();
    tc.family = Family::StudentT;
    TrainConfig gc = tc;
    gc.family = Family::Gaussian;
    auto rows = run_trials<AblationRow>(c.trials, c.jobs, [&](std::size_t i) {
        Rng rng = Rng(c.seed, kTrialStream).child(i);
        AblationRow r;
        r.t = optimize_variational_rows(L.rows, L.n, rng, tc);
        r.gaussian = optimize_variational_rows(L.rows, L.n, rng, gc);
        r.t_distance = center_distance(r.t.z, L);
        r.gaussian_distance = center_distance(r.gaussian.z, L);
        ValueFn v = L.value_fn();
        try {
            r.t_laplacian = laplacian_fd(v, r.t.z.data(), kFdStepLandscape);
            r.gaussian_laplacian = laplacian_fd(v, r.gaussian.z.data(), kFdStepLandscape);
        } catch (const NonFinite&) {
        }
        return r;
    });
    ExperimentResult res;
    res.table.columns = experiment_columns("ablate-dist");
    std::size_t wins = 0;
    std::vector<double> diffs;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& r = rows[i];
        bool not_worse = r.t_distance <= r.gaussian_distance;
        wins += not_worse;
        diffs.push_back(r.gaussian_distance - r.t_distance);
        res.table.add({cell(i), L.name, to_string(r.t.status), to_string(r.gaussian.status), cell(r.t.epochs_run),
                       cell(r.gaussian.epochs_run), cell(r.t_distance), cell(r.gaussian_distance), cell(r.t_laplacian),
                       cell(r.gaussian_laplacian), cell(detail::mean_of(r.t.sigma)), cell(detail::mean_of(r.gaussian.sigma)),
                       cell(not_worse)});
    }
    const std::size_t N = rows.size();
    res.verdicts.push_back(check(static_cast<double>(wins) / static_cast<double>(N) > kAblationMajority, "t-not-worse",
                                 detail::fraction_text(wins, N) +
                                     " trials with t center-distance <= Gaussian center-distance (need > 55%)"));
    Estimate d = mean_and_se(diffs);
    double sd = d.std_error * std::sqrt(static_cast<double>(N));
    res.verdicts.push_back(info("effect-size", "mean (gaussian - t) distance " + detail::num(d.value) + " +/- " +
                                                   detail::num(d.std_error) + " (se), paired d = " +
                                                   detail::num(sd > 0 ? d.value / sd : 0.0, 3)));
    return res;
}

// ---------------------------------------------------------------------------

struct MergeTrial {
    std::uint64_t task_seed = 0;
    TrialStatus status = TrialStatus::Converged;
    std::vector<MergeKind> kinds;
    std::vector<double> iou, zero_iou;
    std::vector<bool> zero_identical;
};

inline std::vector<MergeKind> configured_merge_kinds(const ExperimentConfig& c) {
    if (c.merge == "all") return all_merge_kinds();
    return {parse_merge(c.merge)};
}

// Scores every configured strategy on an already trained distribution.
inline MergeTrial merge_evaluate(const ExperimentConfig& c, std::size_t t, const ToyTask& task, const TrialRecord& w) {
    MergeTrial out;
    out.task_seed = task.spec.seed;
    TrainConfig train = c.mask_train();
    out.status = w.status;
    out.kinds = configured_merge_kinds(c);
    if (w.status == TrialStatus::Diverged) {
        out.iou.assign(out.kinds.size(), NAN);
        out.zero_iou.assign(out.kinds.size(), NAN);
        out.zero_identical.assign(out.kinds.size(), false);
        return out;
    }
    PromptDistribution d;
    d.mu = w.z;
    d.log_sigma = log(w.sigma);
    d.nu = train.nu;
    d.family = train.family;
    d.literal_multiplier = train.literal_multiplier;
    PromptDistribution d0 = d;
    d0.zero_noise = true;
    Rng base = Rng(c.seed, kMergeStream).child(t);
    MergeStrategy reference{MergeKind::MeanPromptOnly, c.merge_k, c.threshold};
    Rng ref_rng = base;
    auto ref_mask = infer(d0, task, reference, ref_rng).mask.values.to_vector();
    for (MergeKind k : out.kinds) {
        MergeStrategy s{k, c.merge_k, c.threshold};
        Rng r = base;  // common random numbers across strategies
        out.iou.push_back(infer(d, task, s, r).iou);
        Rng r0 = base;
        Inference z = infer(d0, task, s, r0);
        out.zero_iou.push_back(z.iou);
        out.zero_identical.push_back(z.mask.values.to_vector() == ref_mask);
    }
    return out;
}

inline MergeTrial merge_trial(const ExperimentConfig& c, std::size_t t) {
    ToyTask task = make_task(c.task_spec(detail::task_seed(c, t)));
    TrialRecord w = optimize_variational(task, Rng(c.seed, kTrialStream).child(t), c.mask_train());
    return merge_evaluate(c, t, task, w);
}

inline ExperimentResult run_merge_eval(const ExperimentConfig& c) {
    auto trials = run_trials<MergeTrial>(c.trials, c.jobs, [&](std::size_t t) { return merge_trial(c, t); });
    ExperimentResult res;
    res.table.columns = experiment_columns("merge-eval");
    const auto kinds = configured_merge_kinds(c);
    std::vector<double> sums(kinds.size(), 0.0);
    std::size_t converged = 0, identical = 0, compared = 0;
    for (std::size_t t = 0; t < trials.size(); ++t) {
        auto& m = trials[t];
        bool conv = m.status == TrialStatus::Converged;
        converged += conv;
        for (std::size_t k = 0; k < kinds.size(); ++k) {
            std::size_t kk = kinds[k] == MergeKind::MeanPromptOnly ? 1 : c.merge_k;
            res.table.add({cell(t), cell(m.task_seed), to_string(m.status), to_string(kinds[k]), cell(kk), cell(m.iou[k]),
                           cell(m.zero_iou[k]), cell(static_cast<bool>(m.zero_identical[k]))});
            if (conv) sums[k] += m.iou[k];
            if (m.status != TrialStatus::Diverged) {
                ++compared;
                identical += m.zero_identical[k];
            }
        }
    }
    std::string means;
    std::optional<double> ref;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        double mean = converged ? sums[k] / static_cast<double>(converged) : NAN;
        means += (k ? ", " : "") + to_string(kinds[k]) + " " + detail::num(mean);
        if (kinds[k] == MergeKind::MeanPromptOnly) ref = mean;
    }
    if (ref && kinds.size() > 1) {
        double worst = 0.0;
        for (std::size_t k = 0; k < kinds.size(); ++k)
            worst = std::max(worst, std::abs(sums[k] / static_cast<double>(converged) - *ref));
        res.verdicts.push_back(check(converged > 0 && worst <= kMergeTolerance, "strategies-agree",
                                     "largest gap to mean-prompt-only " + detail::num(worst, 3) + " over " +
                                         std::to_string(converged) + " converged tasks (need <= 0.02)"));
    }
    res.verdicts.push_back(info("mean-iou", means));
    res.verdicts.push_back(check(compared > 0 && identical == compared, "zero-noise-identical",
                                 detail::fraction_text(identical, compared) +
                                     " (task, strategy) masks identical to mean-prompt-only with sigma = 0"));
    return res;
}

// ---------------------------------------------------------------------------

inline ExperimentResult run_grad_check(const ExperimentConfig& c) {
    const Rng base(c.seed, kGradCaseStream);
    auto results = run_trials<GradCaseResult>(c.grad_cases, c.jobs, [&](std::size_t i) { return run_grad_case(i, base); });
    ExperimentResult res;
    res.table.columns = experiment_columns("grad-check");
    std::size_t ok = 0;
    double worst = 0.0;
    for (auto& r : results) {
        bool pass = r.rel_err < kGradTolerance;
        ok += pass;
        worst = std::max(worst, r.rel_err);
        res.table.add({cell(r.id), r.op, cell(r.params), cell(r.rel_err), cell(pass)});
    }
    const std::size_t N = results.size();
    res.verdicts.push_back(check(ok == N && N >= kMinGradCases, "gradients-match-fd",
                                 detail::fraction_text(ok, N) + " cases below relative error 1e-5 (worst " +
                                     detail::num(worst, 3) + "; need >= 100 cases)"));
    res.verdicts.push_back(info("ops-covered", std::to_string(std::min(N, grad_case_ops().size())) + " of " +
                                                   std::to_string(grad_case_ops().size()) + " operations"));
    return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& c) {
    validate(c);
    if (c.experiment == "verify-prop1") return run_verify_prop1(c);
    if (c.experiment == "scaling") return run_scaling(c);
    if (c.experiment == "prompt-study") return run_prompt_study(c);
    if (c.experiment == "center-seeking") return run_center_seeking(c);
    if (c.experiment == "ablate-dist") return run_ablate_dist(c);
    if (c.experiment == "merge-eval") return run_merge_eval(c);
    if (c.experiment == "grad-check") return run_grad_check(c);
    throw ConfigError("key 'experiment': unknown experiment '" + c.experiment + "'");
}

// ---------------------------------------------------------------------------
// Output files.

inline std::string summary_text(const ExperimentConfig& c, const ExperimentResult& r) {
    std::string s = "varprompt " + std::string(kVersion) + " " + c.experiment + "\n";
    s += "config-hash " + config_hash(c) + ", seed " + std::to_string(c.seed) + ", " + std::to_string(r.table.rows.size()) +
         " rows\n\n";
    for (auto& v : r.verdicts) {
        const char* tag = v.kind == VerdictKind::Pass ? "PASS" : v.kind == VerdictKind::Fail ? "FAIL" : "INFO";
        s += std::string(tag) + "  " + v.criterion + ": " + v.detail + "\n";
    }
    return s;
}

struct OutputFiles {
    std::filesystem::path csv, points, echo, summary;
};

inline OutputFiles output_paths(const ExperimentConfig& c) {
    std::filesystem::path dir(c.out);
    return {dir / (c.experiment + ".csv"), dir / (c.experiment + "_points.csv"), dir / "config.echo", dir / "summary.txt"};
}

// Writes every output or none: files written before a failure are removed.
inline OutputFiles write_outputs(const ExperimentConfig& c, const ExperimentResult& r, const std::string& timestamp) {
    namespace fs = std::filesystem;
    OutputFiles paths = output_paths(c);
    Provenance prov{c.experiment, config_hash(c), c.seed, kVersion, timestamp};
    std::vector<std::pair<fs::path, std::string>> files{{paths.csv, to_csv(r.table, prov)}};
    if (r.points) files.emplace_back(paths.points, to_csv(*r.points, prov));
    files.emplace_back(paths.echo, echo(c));
    files.emplace_back(paths.summary, summary_text(c, r));
    std::vector<fs::path> written;
    try {
        fs::create_directories(c.out);
        for (auto& [path, text] : files) {
            written.push_back(path);
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            out << text;
            out.close();
            if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
        }
    } catch (const fs::filesystem_error& e) {
        for (auto& p : written) fs::remove(p);
        throw RuntimeFailure(e.what());
    } catch (...) {
        for (auto& p : written) {
            std::error_code ec;
            fs::remove(p, ec);
        }
        throw;
    }
    return paths;
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Runs, writes, and maps failures to exit codes.
inline int run(const ExperimentConfig& c, std::ostream& log = std::cerr) {
    try {
        ExperimentResult r = run_experiment(c);
        OutputFiles f = write_outputs(c, r, utc_timestamp());
        std::cout << summary_text(c, r) << "\nwrote " << f.csv.string() << "\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        log << "varprompt: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        log << "varprompt: " << e.what() << "\n";
        return kExitRuntime;
    }
}

} // namespace varprompt

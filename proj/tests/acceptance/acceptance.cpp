// A1-A10 end to end. Prints one PASS/FAIL line per criterion after the run and
// exits non-zero if any criterion fails.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "varprompt/harness.hpp"

using namespace varprompt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    std::string title;
    bool pass = false;
    std::string detail;
};

std::map<int, Outcome>& outcomes() {
    static std::map<int, Outcome> m;
    return m;
}

void record(int id, const std::string& title, bool pass, const std::string& detail) {
    outcomes()[id] = Outcome{title, pass, detail};
    EXPECT_TRUE(pass) << "A" << id << " " << title << ": " << detail;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::size_t jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const Verdict* find_verdict(const ExperimentResult& r, const std::string& name) {
    for (auto& v : r.verdicts)
        if (v.criterion == name) return &v;
    return nullptr;
}

bool passed(const ExperimentResult& r, const std::string& name) {
    const Verdict* v = find_verdict(r, name);
    return v && v->kind == VerdictKind::Pass;
}

std::string verdict_text(const ExperimentResult& r, const std::string& name) {
    const Verdict* v = find_verdict(r, name);
    return v ? v->detail : "missing verdict '" + name + "'";
}

// A6 and A9 share the 50 trained tasks.
struct PromptStudy {
    ExperimentConfig config;
    std::vector<PromptTrial> trials;
    double seconds = 0.0;
};

const PromptStudy& prompt_study() {
    static std::once_flag once;
    static PromptStudy s;
    std::call_once(once, [] {
        s.config = ExperimentConfig{};
        s.config.experiment = "prompt-study";
        s.config.trials = 50;
        s.config.jobs = jobs();
        Stopwatch w;
        s.trials = run_trials<PromptTrial>(s.config.trials, s.config.jobs,
                                           [](std::size_t t) { return prompt_trial(s.config, t); });
        s.seconds = w.seconds();
    });
    return s;
}

}  // namespace

TEST(Acceptance, A1_GradientCorrectness) {
    Stopwatch w;
    ExperimentConfig c;
    c.experiment = "grad-check";
    c.grad_cases = 135;  // five cases per operation
    auto r = run_experiment(c);
    std::size_t ok = 0;
    double worst = 0;
    std::set<std::string> ops;
    for (auto& row : r.table.rows) {
        double e = std::stod(row[3]);
        ok += e < 1e-5;
        worst = std::max(worst, e);
        ops.insert(row[1]);
    }
    double secs = w.seconds();
    bool pass = ok == r.table.rows.size() && ok >= 100 && ops.size() == grad_case_ops().size() && secs < 30.0;
    record(1, "gradient correctness", pass,
           std::to_string(ok) + "/" + std::to_string(r.table.rows.size()) + " cases < 1e-5 over " +
               std::to_string(ops.size()) + " operations, worst " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + " s");
}

TEST(Acceptance, A2_QuadraticExactness) {
    Stopwatch w;
    Rng base(kDefaultSeed, 0xA2);
    std::size_t ok = 0, total = 0;
    double worst = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        Rng r = base.child(i);
        std::size_t n = 2 + (r.next_u64() % 7);  // 2..8
        auto A = random_symmetric(r, n);
        double tr = 0;
        for (std::size_t k = 0; k < n; ++k) tr += A[k * n + k];
        std::vector<double> z(n);
        for (auto& v : z) v = r.normal();
        SmoothFunction f = quadratic_function(A, n);
        for (double sigma : {0.05, 0.1, 0.3}) {
            Rng mc = r.child(static_cast<std::uint64_t>(sigma * 1000));
            auto rep = verify_prop1(f.value, z, sigma, 1000000, mc);
            double dev = std::abs(rep.noise_gap.value - 0.5 * sigma * sigma * tr) / rep.noise_gap.std_error;
            worst = std::max(worst, dev);
            ok += dev <= 3.0;
            ++total;
        }
    }
    double secs = w.seconds();
    record(2, "quadratic exactness", ok == total && secs < 60.0,
           std::to_string(ok) + "/" + std::to_string(total) + " within 3 SE of sigma^2/2 tr(A), worst " + fmt("%.2f", worst) +
               " SE, " + fmt("%.1f", secs) + " s");
}

TEST(Acceptance, A3_ResidualScaling) {
    Stopwatch w;
    const std::vector<double> sigmas{0.02, 0.05, 0.1, 0.2};
    std::size_t ok = 0;
    std::string detail;
    const std::vector<std::string> fns{"exp-sum", "cos-sum", "log1p-norm", "quartic", "mlp"};
    for (std::size_t i = 0; i < fns.size(); ++i) {
        SmoothFunction f = smooth_function(fns[i], 4, 17 + i);
        Rng r(kDefaultSeed, 0xA3 + i);
        std::vector<double> z(4);
        for (auto& v : z) v = 0.5 * r.normal();
        Prop1Options o;
        o.taylor_control = true;
        auto s = scaling_study(f.value, z, sigmas, 200000, r, o);
        bool pass = s.exact || (s.slope && *s.slope >= 2.5);
        ok += pass;
        detail += fns[i] + "=" + (s.exact ? std::string("floor") : s.slope ? fmt("%.2f", *s.slope) : std::string("n/a")) + " ";
    }
    double secs = w.seconds();
    record(3, "residual scaling", ok == fns.size() && ok >= 3 && secs < 120.0,
           std::to_string(ok) + "/" + std::to_string(fns.size()) + " functions; slopes " + detail + fmt("%.1f", secs) + " s");
}

TEST(Acceptance, A4_SamplerLaw) {
    Stopwatch w;
    const double nu = 5, n = 4;
    const double target = oracle::t_marginal_variance(nu, n);
    PromptDistribution d = PromptDistribution::make(Tensor::zeros(Shape{1000, 4}), nu);
    Rng r(kDefaultSeed, 0xA4);
    std::vector<double> s1(4, 0), s2(4, 0);
    const std::size_t draws = 1000000;
    for (std::size_t b = 0; b < draws / 1000; ++b) {
        Tensor z = sample_reparam(d, r);
        for (std::size_t k = 0; k < z.numel(); ++k) {
            s1[k % 4] += z[k];
            s2[k % 4] += z[k] * z[k];
        }
    }
    double worst_var = 0;
    for (int j = 0; j < 4; ++j) {
        double m = s1[j] / draws;
        double v = s2[j] / draws - m * m;
        worst_var = std::max(worst_var, std::abs(v / target - 1.0));
    }
    bool var_ok = worst_var <= 0.02;

    double worst_mean = 0, worst_chi_var = 0;
    for (double df : {1.5, 5.0, 9.0, 30.0}) {
        Rng cr = r.child(static_cast<std::uint64_t>(df * 10));
        double a = 0, b = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            double x = cr.chi_square(df);
            a += x;
            b += x * x;
        }
        double m = a / draws, v = b / draws - m * m;
        worst_mean = std::max(worst_mean, std::abs(m / df - 1.0));
        worst_chi_var = std::max(worst_chi_var, std::abs(v / (2 * df) - 1.0));
    }
    bool chi_ok = worst_mean <= 0.01 && worst_chi_var <= 0.03;

    const std::size_t ks_n = 200000;
    PromptDistribution big = PromptDistribution::make(Tensor::zeros(Shape{ks_n, 4}), 1e6);
    PromptDistribution gauss = PromptDistribution::make(Tensor::zeros(Shape{ks_n, 4}), 5.0, Family::Gaussian);
    Rng kr = r.child(0x5);
    Rng gr = r.child(0x6);
    std::vector<double> ts, gs;
    Tensor zt = sample_reparam(big, kr), zg = sample_reparam(gauss, gr);
    for (std::size_t i = 0; i < ks_n; ++i) {
        ts.push_back(zt[i * 4]);
        gs.push_back(zg[i * 4]);
    }
    double D = oracle::ks_statistic(ts, gs), crit = oracle::ks_critical(0.01, ks_n, ks_n);
    bool ks_ok = D < crit;
    double secs = w.seconds();
    record(4, "sampler law", var_ok && chi_ok && ks_ok && secs < 60.0,
           "variance off by " + fmt("%.3f%%", 100 * worst_var) + " (target " + fmt("%.4f", target) + "), chi2 mean " +
               fmt("%.3f%%", 100 * worst_mean) + " var " + fmt("%.3f%%", 100 * worst_chi_var) + ", KS D=" + fmt("%.5f", D) +
               " < " + fmt("%.5f", crit) + "? " + (ks_ok ? "yes" : "no") + ", " + fmt("%.1f", secs) + " s");
}

TEST(Acceptance, A5_ZeroNoiseDegeneracy) {
    ExperimentConfig c;
    c.family = "gaussian";
    c.mc_samples = 1;
    c.zero_noise = true;
    TrainConfig train = c.mask_train();
    auto same = run_trials<bool>(10, jobs(), [&](std::size_t t) {
        ToyTask task = make_task(c.task_spec(varprompt::detail::task_seed(c, t)));
        Rng rng = Rng(c.seed, kTrialStream).child(t);
        auto v = optimize_vanilla(task, rng, train);
        auto w = optimize_variational(task, rng, train);
        return v.loss_trace == w.loss_trace && v.z.to_vector() == w.z.to_vector() && v.epochs_run == w.epochs_run;
    });
    std::size_t ok = std::count(same.begin(), same.end(), true);
    record(5, "zero-noise degeneracy", ok == 10, std::to_string(ok) + "/10 tasks bitwise identical (loss trace and optimum)");
}

TEST(Acceptance, A6_VerificationStudy) {
    const PromptStudy& s = prompt_study();
    std::size_t N = s.trials.size(), vanilla_ok = 0, parity = 0, flatter = 0;
    for (auto& p : s.trials) {
        double vi = p.vanilla.metrics->iou, wi = p.variational.metrics->iou;
        vanilla_ok += vi > 0.9;
        parity += wi >= vi - 0.02;
        flatter += p.variational_laplacian <= p.vanilla_laplacian;
    }
    bool pass = vanilla_ok * 100 >= 95 * N && parity * 100 >= 90 * N && flatter * 100 >= 80 * N;
    record(6, "verification study", pass,
           "vanilla IoU > 0.9 on " + std::to_string(vanilla_ok) + "/" + std::to_string(N) + ", parity " +
               std::to_string(parity) + "/" + std::to_string(N) + ", flatter " + std::to_string(flatter) + "/" +
               std::to_string(N) + ", " + fmt("%.0f", s.seconds) + " s with " + std::to_string(s.config.jobs) + " job(s)");
}

TEST(Acceptance, A7_CenterSeeking) {
    Stopwatch w;
    ExperimentConfig c;
    c.experiment = "center-seeking";
    c.landscape = "plateau-ball";
    c.dim = 8;
    c.radius = 3;
    c.trials = 200;
    c.jobs = jobs();
    auto plateau = run_experiment(c);
    double plateau_secs = w.seconds();

    // Fixed budget: no early stop, so the jitter of the variational mean has
    // time to average down.
    Stopwatch wq;
    c.landscape = "quadratic-well";
    c.trials = 3;
    c.landscape_min_improvement = 0.0;
    c.landscape_patience = 1000000;
    c.landscape_max_epochs = 1000000;
    auto well = run_experiment(c);
    double well_secs = wq.seconds();
    double secs = w.seconds();
    bool pass = passed(plateau, "variational-closer") && passed(well, "both-reach-center") && secs < 300.0;
    record(7, "center seeking", pass,
           "plateau: " + verdict_text(plateau, "variational-closer") + " [" + fmt("%.0f", plateau_secs) +
               " s]; quadratic well: " + verdict_text(well, "both-reach-center") + " [" + fmt("%.0f", well_secs) + " s]");
}

TEST(Acceptance, A8_DistributionAblation) {
    ExperimentConfig c;
    c.experiment = "ablate-dist";
    c.landscape = "plateau-ball";
    c.trials = 50;
    c.jobs = jobs();
    auto r = run_experiment(c);
    record(8, "t vs Gaussian ablation", passed(r, "t-not-worse"),
           verdict_text(r, "t-not-worse") + "; " + verdict_text(r, "effect-size"));
}

TEST(Acceptance, A9_MergeStrategies) {
    const PromptStudy& s = prompt_study();
    ExperimentConfig c = s.config;
    c.experiment = "merge-eval";
    auto out = run_trials<MergeTrial>(s.trials.size(), jobs(), [&](std::size_t t) {
        ToyTask task = make_task(c.task_spec(s.trials[t].task_seed));
        return merge_evaluate(c, t, task, s.trials[t].variational);
    });
    const auto kinds = all_merge_kinds();
    std::vector<double> sums(kinds.size(), 0.0);
    std::size_t converged = 0, identical = 0, compared = 0;
    for (auto& m : out) {
        if (m.status != TrialStatus::Diverged)
            for (std::size_t k = 0; k < kinds.size(); ++k) {
                ++compared;
                identical += m.zero_identical[k];
            }
        if (m.status != TrialStatus::Converged) continue;
        ++converged;
        for (std::size_t k = 0; k < kinds.size(); ++k) sums[k] += m.iou[k];
    }
    double ref = sums[0] / static_cast<double>(converged), worst = 0;
    std::string means;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        double mean = sums[k] / static_cast<double>(converged);
        worst = std::max(worst, std::abs(mean - ref));
        means += to_string(kinds[k]) + "=" + fmt("%.4f", mean) + " ";
    }
    bool pass = converged == s.trials.size() && worst <= 0.02 && identical == compared && compared > 0;
    record(9, "merge strategies", pass,
           std::to_string(converged) + " converged tasks, largest gap " + fmt("%.4f", worst) + "; " + means +
               "; zero-noise identical " + std::to_string(identical) + "/" + std::to_string(compared));
}

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cli(const std::string& args) {
    std::string cmd = std::string(VARPROMPT_CLI) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Acceptance, A10_Reproducibility) {
    const std::string task = " --m 2 --n 4 --height 8 --width 8 --features 3 --max-epochs 300 --mc-samples 4 --init-std 2";
    const std::vector<std::pair<std::string, std::string>> runs{
        {"grad-check", "--grad-cases 54"},
        {"verify-prop1", "--fn mlp --samples 5000 --trials 4"},
        {"scaling", "--fn cos-sum --samples 5000 --trials 3"},
        {"prompt-study", "--trials 4" + task},
        {"center-seeking", "--trials 6 --dim 3 --landscape-max-epochs 400"},
        {"ablate-dist", "--trials 6 --dim 3 --landscape-max-epochs 400"},
        {"merge-eval", "--trials 4" + task},
    };
    fs::path root = fs::temp_directory_path() / "varprompt_acceptance_a10";
    fs::remove_all(root);
    std::size_t ok = 0;
    std::string bad;
    for (auto& [exp, args] : runs) {
        std::vector<fs::path> dirs{root / (exp + "_a"), root / (exp + "_b"), root / (exp + "_j8")};
        bool ran = cli(exp + " " + args + " --jobs 1 --out " + dirs[0].string()) == 0 &&
                   cli(exp + " " + args + " --jobs 1 --out " + dirs[1].string()) == 0 &&
                   cli(exp + " " + args + " --jobs 8 --out " + dirs[2].string()) == 0;
        bool same = ran;
        for (const std::string file : {exp + ".csv", exp + "_points.csv", std::string("summary.txt")}) {
            if (!same) break;
            bool exists = fs::exists(dirs[0] / file);
            for (auto& d : dirs) {
                if (fs::exists(d / file) != exists) same = false;
                else if (exists) {
                    std::string a = slurp(dirs[0] / file), b = slurp(d / file);
                    same = same && (file == "summary.txt" ? a == b : data_section(a) == data_section(b) && !data_section(a).empty());
                }
            }
        }
        ok += same;
        if (!same) bad += exp + " ";
    }
    fs::remove_all(root);
    record(10, "reproducibility", ok == runs.size(),
           std::to_string(ok) + "/" + std::to_string(runs.size()) +
               " experiments byte-identical across reruns and --jobs 1 vs 8" + (bad.empty() ? "" : "; differing: " + bad));
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    int rc = RUN_ALL_TESTS();
    std::printf("\n");
    bool all = true;
    for (auto& [id, o] : outcomes()) {
        std::printf("A%-2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", o.title.c_str(), o.detail.c_str());
        all = all && o.pass;
    }
    return rc == 0 && all ? 0 : 1;
}

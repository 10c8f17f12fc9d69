#pragma once

// Second-order structure of scalar functions: finite-difference Laplacians,
// Hutchinson trace estimates from autodiff gradients, and Monte Carlo checks of
// the small-noise expansion
//
//     E[f(z + eps)] = f(z) + sigma^2 / 2 * lap f(z) + O(sigma^3)
//
// for isotropic noise with E[eps] = 0 and E[eps eps^T] = sigma^2 I.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varprompt/decoder.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

using ValueFn = std::function<double(std::span<const double>)>;
using GraphFn = std::function<Tensor(const Tensor&)>;

// A scalar test function with a fast double path (for Monte Carlo) and an
// autodiff path (for gradients). The two must agree.
struct SmoothFunction {
    std::string name;
    std::size_t n = 0;
    ValueFn value;
    GraphFn graph;
    // Exact Laplacian at a point, when known in closed form.
    std::function<double(std::span<const double>)> exact_laplacian;
};

inline constexpr double kFdStepAnalytic = 1e-4;
inline constexpr double kFdStepLandscape = 1e-3;

namespace detail {

inline double checked(double v, const char* where) {
    if (!std::isfinite(v)) throw NonFinite(std::string(where) + ": function returned a non-finite value");
    return v;
}

} // namespace detail

// sum_i [f(z + h e_i) - 2 f(z) + f(z - h e_i)] / h^2.
inline double laplacian_fd(const ValueFn& f, std::span<const double> z, double h = kFdStepAnalytic) {
    if (!(h > 0.0)) throw InvalidParam("finite-difference step must be positive");
    std::vector<double> x(z.begin(), z.end());
    const double f0 = detail::checked(f(x), "laplacian_fd");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + h;
        double fp = detail::checked(f(x), "laplacian_fd");
        x[i] = xi - h;
        double fm = detail::checked(f(x), "laplacian_fd");
        x[i] = xi;
        acc += (fp - 2.0 * f0 + fm) / (h * h);
    }
    return acc;
}

// Full finite-difference Hessian; its diagonal uses the same second
// differences as laplacian_fd, so trace(H) == laplacian_fd(f, z, h).
inline std::vector<double> hessian_fd(const ValueFn& f, std::span<const double> z, double h = kFdStepAnalytic) {
    const std::size_t n = z.size();
    std::vector<double> x(z.begin(), z.end()), H(n * n);
    const double f0 = detail::checked(f(x), "hessian_fd");
    auto at = [&](std::size_t i, double di, std::size_t j, double dj) {
        const double xi = x[i], xj = x[j];
        x[i] += di;
        x[j] += dj;
        double v = detail::checked(f(x), "hessian_fd");
        x[i] = xi;
        x[j] = xj;
        return v;
    };
    for (std::size_t i = 0; i < n; ++i) {
        H[i * n + i] = (at(i, h, i, 0.0) - 2.0 * f0 + at(i, -h, i, 0.0)) / (h * h);
        for (std::size_t j = 0; j < i; ++j) {
            double v = (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) / (4.0 * h * h);
            H[i * n + j] = H[j * n + i] = v;
        }
    }
    return H;
}

struct Estimate {
    double value = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

inline Estimate mean_and_se(std::span<const double> xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    double var = xs.size() > 1 ? ss / (n - 1.0) : 0.0;
    return Estimate{mean, std::sqrt(var / n), xs.size()};
}

inline std::vector<double> autodiff_grad(const GraphFn& f, const Tensor& z) {
    Tensor leaf = z.clone_leaf(true);
    Tensor out = f(leaf);
    if (out.numel() != 1) throw NonScalarRoot("function must return a scalar");
    if (!std::isfinite(out.item())) throw NonFinite("hutchinson_trace: non-finite value");
    out.backward();
    return leaf.has_grad() ? leaf.grad_vector() : std::vector<double>(z.numel(), 0.0);
}

// Mean over Rademacher probes v of v . (Hv), with Hv from central differences
// of autodiff gradients.
inline Estimate hutchinson_trace(const GraphFn& f, const Tensor& z, double h, std::size_t num_probes, Rng& rng) {
    if (num_probes < 2) throw InvalidParam("hutchinson_trace needs at least 2 probes");
    if (!(h > 0.0)) throw InvalidParam("finite-difference step must be positive");
    const std::size_t n = z.numel();
    std::vector<double> per_probe(num_probes);
    std::vector<double> v(n), plus(n), minus(n);
    for (std::size_t p = 0; p < num_probes; ++p) {
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = (rng.next_u64() >> 63) ? 1.0 : -1.0;
            plus[i] = z[i] + h * v[i];
            minus[i] = z[i] - h * v[i];
        }
        auto gp = autodiff_grad(f, Tensor(z.shape(), plus));
        auto gm = autodiff_grad(f, Tensor(z.shape(), minus));
        double q = 0.0;
        for (std::size_t i = 0; i < n; ++i) q += v[i] * (gp[i] - gm[i]) / (2.0 * h);
        per_probe[p] = q;
    }
    return mean_and_se(per_probe);
}

enum class NoiseKind { Gaussian, UniformBall };

inline std::string to_string(NoiseKind k) { return k == NoiseKind::Gaussian ? "gaussian" : "uniform-ball"; }

inline NoiseKind parse_noise(const std::string& s) {
    if (s == "gaussian") return NoiseKind::Gaussian;
    if (s == "uniform-ball") return NoiseKind::UniformBall;
    throw InvalidParam("unknown noise '" + s + "'");
}

// Fills eps with isotropic noise of per-coordinate variance sigma^2.
inline void draw_isotropic(Rng& rng, NoiseKind kind, double sigma, std::span<double> eps) {
    for (auto& e : eps) e = rng.normal();
    if (kind == NoiseKind::Gaussian) {
        for (auto& e : eps) e *= sigma;
        return;
    }
    // Uniform in the ball of radius sigma * sqrt(n + 2), whose covariance is sigma^2 I.
    const double n = static_cast<double>(eps.size());
    double norm = 0.0;
    for (double e : eps) norm += e * e;
    norm = std::sqrt(norm);
    const double radius = sigma * std::sqrt(n + 2.0) * std::pow(rng.uniform_open(), 1.0 / n);
    for (auto& e : eps) e *= radius / norm;
}

struct Prop1Options {
    NoiseKind noise = NoiseKind::Gaussian;
    bool antithetic = true;
    // Subtract the second-order Taylor term 1/2 eps^T H eps (H from finite
    // differences) from every draw and add back its exact mean. This leaves the
    // estimate unbiased and removes the O(sigma^2) sampling noise, so the
    // residual can be resolved at small sigma.
    bool taylor_control = false;
    double h = kFdStepAnalytic;
    std::size_t hutchinson_probes = 0;
};

struct CurvatureReport {
    std::vector<double> z;
    double sigma = 0.0;
    double f0 = 0.0;
    double laplacian_fd = 0.0;
    // Bound on the finite-difference error of laplacian_fd, below which the
    // residual cannot be resolved: twice the step-halving difference
    // (truncation) plus twice the textbook rounding bound 4 eps |f| / h^2 per
    // coordinate.
    double laplacian_fd_error = 0.0;
    std::optional<Estimate> laplacian_hutchinson;
    Estimate noise_gap;      // E[f(z + eps)] - f(z)
    Estimate residual;       // noise_gap - sigma^2 / 2 * laplacian_fd
    std::size_t evaluations = 0;
    bool antithetic = true;
    NoiseKind noise = NoiseKind::Gaussian;

    double predicted_gap() const { return 0.5 * sigma * sigma * laplacian_fd; }
    double residual_recomputed() const { return noise_gap.value - predicted_gap(); }
    double fd_floor() const { return 0.5 * sigma * sigma * laplacian_fd_error; }
    double residual_in_se() const {
        return residual.std_error > 0.0 ? std::abs(residual.value) / residual.std_error : (residual.value == 0.0 ? 0.0 : INFINITY);
    }
};

// Monte Carlo check of the small-noise expansion at z. num_samples counts
// noise draws; with antithetic pairs each draw is evaluated at +eps and -eps.
inline CurvatureReport verify_prop1(const ValueFn& f, std::span<const double> z, double sigma, std::size_t num_samples,
                                    Rng& rng, const Prop1Options& opts = {}, const GraphFn& graph = {}) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidParam("sigma must be positive");
    if (num_samples < 2) throw InvalidParam("need at least 2 samples");
    const std::size_t n = z.size();
    CurvatureReport r;
    r.z.assign(z.begin(), z.end());
    r.sigma = sigma;
    r.antithetic = opts.antithetic;
    r.noise = opts.noise;
    r.f0 = detail::checked(f(z), "verify_prop1");
    std::vector<double> H;
    if (opts.taylor_control) {
        H = hessian_fd(f, z, opts.h);
        r.laplacian_fd = 0.0;
        for (std::size_t i = 0; i < n; ++i) r.laplacian_fd += H[i * n + i];
    } else {
        r.laplacian_fd = laplacian_fd(f, z, opts.h);
    }
    r.laplacian_fd_error = 2.0 * std::abs(r.laplacian_fd - laplacian_fd(f, z, 2.0 * opts.h)) +
                           8.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon() *
                               std::max(1.0, std::abs(r.f0)) / (opts.h * opts.h);
    if (opts.hutchinson_probes >= 2 && graph) {
        Rng probe = rng.child(0x4875);
        r.laplacian_hutchinson = hutchinson_trace(graph, Tensor(Shape{n}, r.z), opts.h, opts.hutchinson_probes, probe);
    }
    const double predicted = r.predicted_gap();
    std::vector<double> gaps(num_samples), resid(num_samples);
    std::vector<double> eps(n), x(n);
    for (std::size_t s = 0; s < num_samples; ++s) {
        draw_isotropic(rng, opts.noise, sigma, eps);
        for (std::size_t i = 0; i < n; ++i) x[i] = z[i] + eps[i];
        double g = detail::checked(f(x), "verify_prop1");
        if (opts.antithetic) {
            for (std::size_t i = 0; i < n; ++i) x[i] = z[i] - eps[i];
            g = 0.5 * (g + detail::checked(f(x), "verify_prop1"));
        }
        g -= r.f0;
        gaps[s] = g;
        double c = 0.0;
        if (opts.taylor_control) {
            for (std::size_t i = 0; i < n; ++i) {
                double row = 0.0;
                for (std::size_t j = 0; j < n; ++j) row += H[i * n + j] * eps[j];
                c += eps[i] * row;
            }
            c *= 0.5;
        } else {
            c = predicted;
        }
        resid[s] = g - c;
    }
    r.evaluations = num_samples * (opts.antithetic ? 2 : 1);
    r.residual = mean_and_se(resid);
    if (opts.taylor_control) {
        // Control-variate estimate of the gap; E[c] equals `predicted` exactly.
        r.noise_gap = Estimate{r.residual.value + predicted, r.residual.std_error, num_samples};
    } else {
        r.noise_gap = mean_and_se(gaps);
    }
    return r;
}

struct ScalingRow {
    double sigma = 0.0;
    Estimate residual;
    double abs_residual = 0.0;
    bool below_floor = false;  // |residual| < 3 std-errors + finite-difference floor
    CurvatureReport report;
};

struct ScalingResult {
    std::vector<ScalingRow> rows;
    std::optional<double> slope;  // least squares on log |residual| vs log sigma
    bool exact = false;           // every residual is at the noise floor
};

inline constexpr double kFloorSe = 3.0;

// Slope of log|residual| against log sigma over rows resolved above the
// Monte Carlo floor. When no row is resolved the result is flagged exact;
// callers that need a slope should use scaling_slope_or_throw.
inline ScalingResult scaling_study(const ValueFn& f, std::span<const double> z, const std::vector<double>& sigmas,
                                   std::size_t num_samples, Rng& rng, Prop1Options opts = {}) {
    if (sigmas.size() < 4) throw InvalidParam("scaling study needs at least 4 sigma values");
    auto [lo, hi] = std::minmax_element(sigmas.begin(), sigmas.end());
    if (!(*lo > 0.0) || *hi / *lo < 10.0 - 1e-12) throw InvalidParam("sigma values must span at least one decade");
    opts.antithetic = true;
    ScalingResult out;
    for (std::size_t k = 0; k < sigmas.size(); ++k) {
        Rng child = rng.child(k);
        ScalingRow row;
        row.sigma = sigmas[k];
        row.report = verify_prop1(f, z, sigmas[k], num_samples, child, opts);
        row.residual = row.report.residual;
        row.abs_residual = std::abs(row.residual.value);
        row.below_floor = row.abs_residual < kFloorSe * row.residual.std_error + row.report.fd_floor() || row.abs_residual == 0.0;
        out.rows.push_back(row);
    }
    std::vector<double> lx, ly;
    for (auto& row : out.rows)
        if (!row.below_floor) {
            lx.push_back(std::log(row.sigma));
            ly.push_back(std::log(row.abs_residual));
        }
    out.exact = lx.empty();
    if (lx.size() >= 2) {
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < lx.size(); ++i) {
            mx += lx[i];
            my += ly[i];
        }
        mx /= static_cast<double>(lx.size());
        my /= static_cast<double>(lx.size());
        double sxy = 0, sxx = 0;
        for (std::size_t i = 0; i < lx.size(); ++i) {
            sxy += (lx[i] - mx) * (ly[i] - my);
            sxx += (lx[i] - mx) * (lx[i] - mx);
        }
        out.slope = sxy / sxx;
    }
    return out;
}

inline double scaling_slope_or_throw(const ScalingResult& r) {
    if (!r.slope) throw InsufficientSignal("residuals are below the Monte Carlo noise floor at every sigma");
    return *r.slope;
}

// Laplacian of the mask loss at z, by second differences over all m*n entries.
inline double flatness_at(const ToyTask& task, const Tensor& z, double h = kFdStepLandscape) {
    const Shape shape = z.shape();
    ValueFn f = [&](std::span<const double> x) {
        return task.loss(Tensor(shape, std::vector<double>(x.begin(), x.end()))).item();
    };
    auto v = z.to_vector();
    return laplacian_fd(f, v, h);
}

inline Estimate flatness_hutchinson(const ToyTask& task, const Tensor& z, std::size_t probes, Rng& rng,
                                    double h = kFdStepLandscape) {
    return hutchinson_trace([&](const Tensor& x) { return task.loss(x); }, z.detach(), h, probes, rng);
}

// ---------------------------------------------------------------------------
// Registered smooth test functions.

namespace detail {

inline SmoothFunction make_quadratic(std::string name, std::vector<double> A, std::size_t n) {
    SmoothFunction s;
    s.name = std::move(name);
    s.n = n;
    s.value = [A, n](std::span<const double> z) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) acc += z[i] * A[i * n + j] * z[j];
        return 0.5 * acc;
    };
    Tensor At(Shape{n, n}, A);
    s.graph = [At, n](const Tensor& z) {
        Tensor col = reshape(z, Shape{n, 1});
        return 0.5 * sum(col * matmul(At, col));
    };
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) tr += A[i * n + i];
    s.exact_laplacian = [tr](std::span<const double>) { return tr; };
    return s;
}

} // namespace detail

// Symmetric matrix with N(0,1) entries, from the given stream.
inline std::vector<double> random_symmetric(Rng& rng, std::size_t n) {
    std::vector<double> A(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) A[i * n + j] = A[j * n + i] = rng.normal();
    return A;
}

// 0.5 z^T A z.
inline SmoothFunction quadratic_function(std::vector<double> A, std::size_t n) {
    if (A.size() != n * n) throw ShapeMismatch("quadratic matrix must be n x n");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (A[i * n + j] != A[j * n + i]) throw InvalidParam("quadratic matrix must be symmetric");
    return detail::make_quadratic("quadratic", std::move(A), n);
}

// Random tanh network R^n -> R with one hidden layer, for estimator
// consistency checks on non-separable functions.
inline SmoothFunction random_mlp(Rng& rng, std::size_t n, std::size_t hidden = 6) {
    std::vector<double> W(hidden * n), b(hidden), a(hidden);
    for (auto& w : W) w = rng.normal() / std::sqrt(static_cast<double>(n));
    for (auto& x : b) x = 0.5 * rng.normal();
    for (auto& x : a) x = rng.normal();
    SmoothFunction s;
    s.name = "mlp";
    s.n = n;
    s.value = [=](std::span<const double> z) {
        double acc = 0.0;
        for (std::size_t k = 0; k < hidden; ++k) {
            double u = b[k];
            for (std::size_t i = 0; i < n; ++i) u += W[k * n + i] * z[i];
            acc += a[k] * std::tanh(u);
        }
        return acc;
    };
    Tensor Wt(Shape{hidden, n}, W), bt(Shape{hidden, 1}, b), at(Shape{1, hidden}, a);
    s.graph = [=](const Tensor& z) { return sum(matmul(at, tanh(matmul(Wt, reshape(z, Shape{n, 1})) + bt))); };
    return s;
}

inline const std::vector<std::string>& smooth_function_names() {
    static const std::vector<std::string> names{"quadratic", "norm-squared", "exp-sum", "cos-sum",
                                                "log1p-norm", "quartic", "cubic", "mlp"};
    return names;
}

// Registry by name; n is the dimension, seed drives any random coefficients.
inline SmoothFunction smooth_function(const std::string& name, std::size_t n = 4, std::uint64_t seed = kDefaultSeed) {
    if (n == 0) throw InvalidParam("dimension must be positive");
    SmoothFunction s;
    s.name = name;
    s.n = n;
    if (name == "quadratic") {
        Rng rng(seed, 0x9AD);
        auto q = quadratic_function(random_symmetric(rng, n), n);
        return q;
    }
    if (name == "norm-squared") {
        s.value = [](std::span<const double> z) {
            double a = 0.0;
            for (double x : z) a += x * x;
            return a;
        };
        s.graph = [](const Tensor& z) { return sum(z * z); };
        s.exact_laplacian = [n](std::span<const double>) { return 2.0 * static_cast<double>(n); };
        return s;
    }
    if (name == "exp-sum") {
        if (n < 2) throw InvalidParam("exp-sum needs n >= 2");
        s.value = [](std::span<const double> z) { return std::exp(z[0]) + std::exp(z[1]); };
        s.graph = [](const Tensor& z) { return sum(exp(take(z, {0, 1}))); };
        s.exact_laplacian = [](std::span<const double> z) { return std::exp(z[0]) + std::exp(z[1]); };
        return s;
    }
    if (name == "cos-sum") {
        s.value = [](std::span<const double> z) {
            double a = 0.0;
            for (double x : z) a += std::cos(x);
            return a;
        };
        s.graph = [](const Tensor& z) { return sum(cos(z)); };
        s.exact_laplacian = [](std::span<const double> z) {
            double a = 0.0;
            for (double x : z) a -= std::cos(x);
            return a;
        };
        return s;
    }
    if (name == "log1p-norm") {
        s.value = [](std::span<const double> z) {
            double r2 = 0.0;
            for (double x : z) r2 += x * x;
            return std::log1p(r2);
        };
        s.graph = [](const Tensor& z) { return log(1.0 + sum(z * z)); };
        // lap log(1 + r^2) = 2n / (1 + r^2) - 4 r^2 / (1 + r^2)^2
        s.exact_laplacian = [n](std::span<const double> z) {
            double r2 = 0.0;
            for (double x : z) r2 += x * x;
            return 2.0 * static_cast<double>(n) / (1.0 + r2) - 4.0 * r2 / ((1.0 + r2) * (1.0 + r2));
        };
        return s;
    }
    if (name == "quartic") {
        // sum z_i^4 / 4 + z_i^2 / 2
        s.value = [](std::span<const double> z) {
            double a = 0.0;
            for (double x : z) a += 0.25 * x * x * x * x + 0.5 * x * x;
            return a;
        };
        s.graph = [](const Tensor& z) {
            Tensor z2 = z * z;
            return sum(0.25 * z2 * z2 + 0.5 * z2);
        };
        s.exact_laplacian = [](std::span<const double> z) {
            double a = 0.0;
            for (double x : z) a += 3.0 * x * x + 1.0;
            return a;
        };
        return s;
    }
    if (name == "cubic") {
        s.value = [](std::span<const double> z) { return z[0] * z[0] * z[0]; };
        s.graph = [](const Tensor& z) {
            Tensor x = take(z, {0});
            return sum(x * x * x);
        };
        s.exact_laplacian = [](std::span<const double> z) { return 6.0 * z[0]; };
        return s;
    }
    if (name == "mlp") {
        Rng rng(seed, 0x31F);
        return random_mlp(rng, n);
    }
    throw InvalidParam("unknown function '" + name + "'");
}

} // namespace varprompt

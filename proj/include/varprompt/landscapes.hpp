#pragma once

// Analytic loss landscapes with a known basin center and radius, the
// center-seeking study built on the two learners, and a PCA projection of
// prompt clouds to 2D.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varprompt/curvature.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/optim.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

enum class LandscapeFamily { PlateauBall, QuadraticWell, AsymmetricValley, MultiBasin };

inline std::string to_string(LandscapeFamily f) {
    switch (f) {
    case LandscapeFamily::PlateauBall: return "plateau-ball";
    case LandscapeFamily::QuadraticWell: return "quadratic-well";
    case LandscapeFamily::AsymmetricValley: return "asymmetric-valley";
    case LandscapeFamily::MultiBasin: return "multi-basin";
    }
    return "?";
}

struct Basin {
    std::vector<double> center;
    double radius = 0.0;
    double depth = 0.0;  // value added on top of the plateau; 0 for the deepest
};

struct Landscape {
    std::string name;
    LandscapeFamily family = LandscapeFamily::PlateauBall;
    std::size_t n = 0;
    std::vector<double> center;
    double basin_radius = 0.0;
    // Largest value attained inside the basin; the basin-optimality tolerance.
    double plateau_depth = 0.0;
    double sharpness = 10.0;
    std::vector<Basin> basins;  // multi-basin only; basins[0] is the deepest
    GraphFn graph;              // any tensor with n entries -> scalar
    GraphFn rows;               // K x n batch -> K values, row by row

    Tensor eval(const Tensor& z) const {
        if (z.numel() != n) throw ShapeMismatch("landscape of dimension " + std::to_string(n) + " given " + shape_str(z.shape()));
        return graph(z);
    }
    double value(std::span<const double> z) const {
        return eval(Tensor(Shape{z.size()}, std::vector<double>(z.begin(), z.end()))).item();
    }
    ValueFn value_fn() const {
        return [this](std::span<const double> z) { return value(z); };
    }
};

namespace detail {

inline Tensor as_vector(const Tensor& z, std::size_t n) { return z.rank() == 1 ? z : reshape(z, Shape{n}); }

inline void require_center(const std::vector<double>& c, std::size_t n) {
    if (n == 0) throw InvalidParam("dimension must be positive");
    if (c.size() != n) throw InvalidParam("center has " + std::to_string(c.size()) + " entries, expected " + std::to_string(n));
    for (double x : c)
        if (!std::isfinite(x)) throw InvalidParam("center must be finite");
}

inline double stable_softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

} // namespace detail

// softplus(beta * (|z - c| - r)): close to zero inside the ball, linear
// outside. The norm has a zero subgradient at the center.
inline Landscape plateau_ball(std::size_t n, std::vector<double> center, double radius, double beta = 10.0) {
    detail::require_center(center, n);
    if (!(radius > 0.0)) throw InvalidParam("radius must be positive");
    if (!(beta > 0.0)) throw InvalidParam("sharpness must be positive");
    Landscape L;
    L.name = "plateau-ball";
    L.family = LandscapeFamily::PlateauBall;
    L.n = n;
    L.center = center;
    L.basin_radius = radius;
    L.sharpness = beta;
    L.plateau_depth = detail::stable_softplus_value(0.0);
    Tensor c(Shape{n}, center);
    L.graph = [c, n, radius, beta](const Tensor& z) { return softplus(beta * (norm(detail::as_vector(z, n) - c) - radius)); };
    L.rows = [c, radius, beta](const Tensor& Z) { return softplus(beta * (row_norms(Z - c) - radius)); };
    return L;
}

// a/2 |z - c|^2; a single minimum at the center.
inline Landscape quadratic_well(std::size_t n, std::vector<double> center, double curvature = 1.0) {
    detail::require_center(center, n);
    if (!(curvature > 0.0)) throw InvalidParam("curvature must be positive");
    Landscape L;
    L.name = "quadratic-well";
    L.family = LandscapeFamily::QuadraticWell;
    L.n = n;
    L.center = center;
    L.basin_radius = 0.0;
    L.plateau_depth = 0.0;
    Tensor c(Shape{n}, center);
    L.graph = [c, n, curvature](const Tensor& z) {
        Tensor d = detail::as_vector(z, n) - c;
        return 0.5 * curvature * sum(d * d);
    };
    L.rows = [c, curvature](const Tensor& Z) {
        Tensor d = Z - c;
        return 0.5 * curvature * sum(d * d, 1);
    };
    return L;
}

// A flat box of half-width r around the center whose walls rise at beta on
// the positive side of every axis and at beta / 4 on the negative side.
inline Landscape asymmetric_valley(std::size_t n, std::vector<double> center, double radius, double beta = 10.0) {
    detail::require_center(center, n);
    if (!(radius > 0.0)) throw InvalidParam("radius must be positive");
    if (!(beta > 0.0)) throw InvalidParam("sharpness must be positive");
    Landscape L;
    L.name = "asymmetric-valley";
    L.family = LandscapeFamily::AsymmetricValley;
    L.n = n;
    L.center = center;
    L.basin_radius = radius;
    L.sharpness = beta;
    const double shallow = 0.25 * beta;
    L.plateau_depth = static_cast<double>(n) * (detail::stable_softplus_value(0.0) + detail::stable_softplus_value(-2.0 * shallow * radius));
    Tensor c(Shape{n}, center);
    L.graph = [c, n, radius, beta, shallow](const Tensor& z) {
        Tensor d = detail::as_vector(z, n) - c;
        return sum(softplus(beta * (d - radius)) + softplus(shallow * (-1.0 * d - radius)));
    };
    L.rows = [c, radius, beta, shallow](const Tensor& Z) {
        Tensor d = Z - c;
        return sum(softplus(beta * (d - radius)) + softplus(shallow * (-1.0 * d - radius)), 1);
    };
    return L;
}

// Smooth minimum of plateau balls with distinct depths; basins[0] (depth 0)
// is the global basin.
inline Landscape multi_basin(std::size_t n, std::vector<Basin> basins, double beta = 10.0, double temperature = 0.05) {
    if (basins.size() < 2) throw InvalidParam("multi-basin needs at least two basins");
    for (auto& b : basins) {
        detail::require_center(b.center, n);
        if (!(b.radius > 0.0)) throw InvalidParam("basin radius must be positive");
        if (b.depth < 0.0) throw InvalidParam("basin depth must be non-negative");
    }
    if (basins[0].depth != 0.0) throw InvalidParam("the first basin must be the deepest (depth 0)");
    for (std::size_t j = 1; j < basins.size(); ++j)
        if (!(basins[j].depth > 0.0)) throw InvalidParam("depths must be distinct");
    Landscape L;
    L.name = "multi-basin";
    L.family = LandscapeFamily::MultiBasin;
    L.n = n;
    L.center = basins[0].center;
    L.basin_radius = basins[0].radius;
    L.sharpness = beta;
    L.basins = basins;
    L.plateau_depth = detail::stable_softplus_value(0.0);
    std::vector<Tensor> centers;
    for (auto& b : basins) centers.emplace_back(Shape{n}, b.center);
    L.graph = [centers, basins, n, beta, temperature](const Tensor& z) {
        Tensor v = detail::as_vector(z, n);
        std::vector<Tensor> g;
        double lowest = INFINITY;
        for (std::size_t j = 0; j < basins.size(); ++j) {
            g.push_back(basins[j].depth + softplus(beta * (norm(v - centers[j]) - basins[j].radius)));
            lowest = std::min(lowest, g.back().item());
        }
        // -T log sum exp(-g / T), shifted by the smallest g for stability.
        std::optional<Tensor> acc;
        for (auto& gj : g) {
            Tensor e = exp((lowest - gj) / temperature);
            acc = acc ? *acc + e : e;
        }
        return lowest - temperature * log(*acc);
    };
    L.rows = [centers, basins, beta, temperature](const Tensor& Z) {
        std::vector<Tensor> g;
        std::vector<double> lowest(Z.dim(0), INFINITY);
        for (std::size_t j = 0; j < basins.size(); ++j) {
            g.push_back(basins[j].depth + softplus(beta * (row_norms(Z - centers[j]) - basins[j].radius)));
            for (std::size_t r = 0; r < lowest.size(); ++r) lowest[r] = std::min(lowest[r], g.back()[r]);
        }
        Tensor low(Shape{lowest.size()}, lowest);
        std::optional<Tensor> acc;
        for (auto& gj : g) {
            Tensor e = exp((low - gj) / temperature);
            acc = acc ? *acc + e : e;
        }
        return low - temperature * log(*acc);
    };
    return L;
}

inline std::vector<double> zeros_vector(std::size_t n) { return std::vector<double>(n, 0.0); }

inline const std::vector<std::string>& landscape_names() {
    static const std::vector<std::string> names{"plateau-ball", "quadratic-well", "asymmetric-valley", "multi-basin"};
    return names;
}

// Registry by name, centered at the origin. Multi-basin places two shallower
// basins at distance 4r along seeded random directions.
inline Landscape make_landscape(const std::string& name, std::size_t n = 8, double radius = 3.0, double beta = 10.0,
                                std::uint64_t seed = kDefaultSeed) {
    if (name == "plateau-ball") return plateau_ball(n, zeros_vector(n), radius, beta);
    if (name == "quadratic-well") return quadratic_well(n, zeros_vector(n));
    if (name == "asymmetric-valley") return asymmetric_valley(n, zeros_vector(n), radius, beta);
    if (name == "multi-basin") {
        Rng rng(seed, 0xBA51);
        std::vector<Basin> basins{Basin{zeros_vector(n), radius, 0.0}};
        for (double depth : {0.5, 1.0}) {
            std::vector<double> dir(n);
            double s = 0.0;
            for (auto& x : dir) {
                x = rng.normal();
                s += x * x;
            }
            s = std::sqrt(s);
            for (auto& x : dir) x *= 4.0 * radius / s;
            basins.push_back(Basin{dir, radius, depth});
        }
        return multi_basin(n, basins, beta);
    }
    throw InvalidParam("unknown landscape '" + name + "'");
}

// Same landscape moved by `shift`.
inline Landscape translate(const Landscape& L, const std::vector<double>& shift) {
    if (shift.size() != L.n) throw ShapeMismatch("shift dimension does not match landscape");
    Landscape out = L;
    for (std::size_t i = 0; i < L.n; ++i) out.center[i] += shift[i];
    for (auto& b : out.basins)
        for (std::size_t i = 0; i < L.n; ++i) b.center[i] += shift[i];
    Tensor s(Shape{L.n}, shift);
    GraphFn inner = L.graph;
    std::size_t n = L.n;
    out.graph = [inner, s, n](const Tensor& z) { return inner(detail::as_vector(z, n) - s); };
    GraphFn inner_rows = L.rows;
    out.rows = [inner_rows, s](const Tensor& Z) { return inner_rows(Z - s); };
    return out;
}

inline double center_distance(std::span<const double> z, const Landscape& L) {
    if (z.size() != L.n) throw ShapeMismatch("point has " + std::to_string(z.size()) + " entries, landscape " + std::to_string(L.n));
    double s = 0.0;
    for (std::size_t i = 0; i < L.n; ++i) s += (z[i] - L.center[i]) * (z[i] - L.center[i]);
    return std::sqrt(s);
}

inline double center_distance(const Tensor& z, const Landscape& L) { return center_distance(z.data(), L); }

// Index of the basin whose center is nearest (0 for single-basin families).
inline std::size_t nearest_basin(std::span<const double> z, const Landscape& L) {
    if (L.basins.empty()) return 0;
    std::size_t best = 0;
    double bd = INFINITY;
    for (std::size_t j = 0; j < L.basins.size(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < L.n; ++i) s += (z[i] - L.basins[j].center[i]) * (z[i] - L.basins[j].center[i]);
        if (s < bd) {
            bd = s;
            best = j;
        }
    }
    return best;
}

// Haar-random orthogonal matrix (row-major) from QR of a Gaussian matrix.
inline std::vector<double> random_rotation(std::size_t n, Rng& rng) {
    Eigen::MatrixXd G(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) G(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd Q = qr.householderQ();
    Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (std::size_t j = 0; j < n; ++j)
        if (R(j, j) < 0) Q.col(j) *= -1.0;
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = Q(i, j);
    return out;
}

inline std::vector<double> apply_rotation(const std::vector<double>& Q, std::span<const double> z) {
    const std::size_t n = z.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += Q[i * n + j] * z[j];
    return out;
}

// ---------------------------------------------------------------------------

struct CenterSeekingConfig {
    TrainConfig train;
    std::size_t trials = 200;
    bool flatness = true;  // also record the Laplacian at both optima
    double fd_step = kFdStepLandscape;
};

struct CenterSeekingRow {
    std::size_t trial = 0;
    TrialRecord vanilla;
    TrialRecord variational;
    double vanilla_distance = 0.0;
    double variational_distance = 0.0;
    double vanilla_margin = 0.0;      // radius - distance
    double variational_margin = 0.0;
    std::size_t vanilla_basin = 0;
    std::size_t variational_basin = 0;
    double vanilla_laplacian = NAN;
    double variational_laplacian = NAN;

    bool variational_closer() const { return variational_distance < vanilla_distance; }
};

struct CenterSeekingSummary {
    std::vector<CenterSeekingRow> rows;
    std::size_t closer = 0;
    std::size_t flatter = 0;
    std::size_t divergences = 0;
    double mean_vanilla_distance = 0.0;
    double mean_variational_distance = 0.0;
    double mean_vanilla_margin = 0.0;
    double mean_variational_margin = 0.0;

    double closer_fraction() const { return rows.empty() ? 0.0 : static_cast<double>(closer) / static_cast<double>(rows.size()); }
    double flatter_fraction() const { return rows.empty() ? 0.0 : static_cast<double>(flatter) / static_cast<double>(rows.size()); }
};

// One paired trial: vanilla and variational start from the same point.
inline CenterSeekingRow center_seeking_trial(const Landscape& L, std::size_t trial, Rng rng, const CenterSeekingConfig& cfg) {
    Objective f = [&L](const Tensor& z) { return L.eval(z); };
    const Shape shape{1, L.n};
    CenterSeekingRow row;
    row.trial = trial;
    row.vanilla = optimize_vanilla(f, shape, rng, cfg.train);
    row.variational = optimize_variational_rows(L.rows, L.n, rng, cfg.train);
    row.vanilla.trial_id = row.variational.trial_id = trial;
    row.vanilla_distance = center_distance(row.vanilla.z, L);
    row.variational_distance = center_distance(row.variational.z, L);
    row.vanilla_margin = L.basin_radius - row.vanilla_distance;
    row.variational_margin = L.basin_radius - row.variational_distance;
    row.vanilla_basin = nearest_basin(row.vanilla.z.data(), L);
    row.variational_basin = nearest_basin(row.variational.z.data(), L);
    if (cfg.flatness) {
        ValueFn v = L.value_fn();
        try {
            row.vanilla_laplacian = laplacian_fd(v, row.vanilla.z.data(), cfg.fd_step);
            row.variational_laplacian = laplacian_fd(v, row.variational.z.data(), cfg.fd_step);
        } catch (const NonFinite&) {
        }
    }
    return row;
}

inline CenterSeekingSummary summarize(std::vector<CenterSeekingRow> rows) {
    CenterSeekingSummary s;
    s.rows = std::move(rows);
    for (auto& r : s.rows) {
        s.closer += r.variational_closer();
        s.flatter += r.variational_laplacian <= r.vanilla_laplacian;
        s.divergences += (r.vanilla.status == TrialStatus::Diverged) + (r.variational.status == TrialStatus::Diverged);
        s.mean_vanilla_distance += r.vanilla_distance;
        s.mean_variational_distance += r.variational_distance;
        s.mean_vanilla_margin += r.vanilla_margin;
        s.mean_variational_margin += r.variational_margin;
    }
    if (!s.rows.empty()) {
        double k = static_cast<double>(s.rows.size());
        s.mean_vanilla_distance /= k;
        s.mean_variational_distance /= k;
        s.mean_vanilla_margin /= k;
        s.mean_variational_margin /= k;
    }
    return s;
}

// Trial i uses rng.child(i); both learners in a pair share that stream.
inline CenterSeekingSummary center_seeking_study(const Landscape& L, std::size_t trials, const Rng& rng,
                                                 const CenterSeekingConfig& cfg) {
    std::vector<CenterSeekingRow> rows;
    rows.reserve(trials);
    for (std::size_t i = 0; i < trials; ++i) rows.push_back(center_seeking_trial(L, i, rng.child(i), cfg));
    return summarize(std::move(rows));
}

// ---------------------------------------------------------------------------

struct Projection2D {
    std::vector<std::array<double, 2>> points;
    std::array<std::vector<double>, 2> axes;  // principal directions, unit length
    std::array<double, 2> variances{};
    bool degenerate = false;  // rank < 2; missing axes are zero
};

// Projects onto the top two principal components of the centered cloud. Each
// axis is signed so its largest-magnitude loading is positive.
inline Projection2D pca_project(const std::vector<std::vector<double>>& points) {
    if (points.size() < 3) throw DegenerateCloud("need at least 3 points, got " + std::to_string(points.size()));
    const std::size_t n = points[0].size();
    for (auto& p : points)
        if (p.size() != n) throw ShapeMismatch("points differ in dimension");
    const std::size_t N = points.size();
    Eigen::MatrixXd X(N, n);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < n; ++j) X(i, j) = points[i][j];
    Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    Eigen::MatrixXd C = (X.transpose() * X) / static_cast<double>(N);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    const Eigen::VectorXd& ev = es.eigenvalues();  // ascending
    const double top = n > 0 ? std::max(ev(n - 1), 0.0) : 0.0;
    const double tol = 1e-12 * std::max(top, 1e-300);
    Projection2D out;
    out.points.assign(N, {0.0, 0.0});
    for (int k = 0; k < 2; ++k) {
        out.axes[k].assign(n, 0.0);
        if (static_cast<std::size_t>(k) >= n) {
            out.degenerate = true;
            continue;
        }
        double lambda = ev(n - 1 - k);
        if (!(lambda > tol) || top == 0.0) {
            out.degenerate = true;
            continue;
        }
        Eigen::VectorXd a = es.eigenvectors().col(n - 1 - k);
        Eigen::Index arg = 0;
        for (Eigen::Index j = 1; j < a.size(); ++j)
            if (std::abs(a(j)) > std::abs(a(arg)) + 1e-12) arg = j;
        if (a(arg) < 0) a = -a;
        out.variances[k] = lambda;
        for (std::size_t j = 0; j < n; ++j) out.axes[k][j] = a(j);
        Eigen::VectorXd proj = X * a;
        for (std::size_t i = 0; i < N; ++i) out.points[i][k] = proj(i);
    }
    return out;
}

inline std::vector<std::vector<double>> tsne_substitute_projection(const std::vector<std::vector<double>>& points) {
    auto p = pca_project(points);
    std::vector<std::vector<double>> out;
    for (auto& q : p.points) out.push_back({q[0], q[1]});
    return out;
}

} // namespace varprompt

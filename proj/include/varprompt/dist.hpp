#pragma once

// Variational prompt distributions with reparameterized sampling.
//
// StudentT rows follow a multivariate t with location mu, scale
// diag(sigma^2) / (1 + n / nu) and nu + n degrees of freedom. A sample is
//
//     z = mu + sqrt((nu + n) / delta) * sigma / sqrt(1 + n / nu) * eps,
//
// with eps ~ N(0, I) per entry and one delta ~ chi2(nu + n) per prompt row.
// The Gaussian family is z = mu + sigma * eps. The noise (eps, delta) is
// constant to autodiff; gradients reach mu and log_sigma only.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "varprompt/errors.hpp"
#include "varprompt/gradcheck.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

enum class Family { StudentT, Gaussian };

inline std::string to_string(Family f) { return f == Family::StudentT ? "student-t" : "gaussian"; }

inline Family parse_family(const std::string& s) {
    if (s == "student-t" || s == "t" || s == "studentt") return Family::StudentT;
    if (s == "gaussian" || s == "normal") return Family::Gaussian;
    throw InvalidDistribution("unknown family '" + s + "'");
}

struct PromptDistribution {
    Tensor mu;         // m x n mean prompt embeddings
    Tensor log_sigma;  // m x n log of the per-dimension scale
    double nu = 5.0;
    Family family = Family::StudentT;
    // Clamp sigma to zero: every sample equals mu.
    bool zero_noise = false;
    // Use the multiplier (nu + n) / sqrt(delta) instead of sqrt((nu + n) / delta).
    bool literal_multiplier = false;

    static PromptDistribution make(Tensor mu, double nu = 5.0, Family family = Family::StudentT) {
        PromptDistribution d;
        d.log_sigma = Tensor::zeros(mu.shape(), true);
        d.mu = std::move(mu);
        d.nu = nu;
        d.family = family;
        d.validate();
        return d;
    }

    std::size_t rows() const { return mu.dim(0); }
    std::size_t n() const { return mu.dim(1); }

    void validate() const {
        if (mu.rank() != 2) throw InvalidDistribution("mu must be a matrix, got " + shape_str(mu.shape()));
        if (mu.shape() != log_sigma.shape())
            throw InvalidDistribution("mu " + shape_str(mu.shape()) + " and log_sigma " +
                                      shape_str(log_sigma.shape()) + " differ in shape");
        for (double ls : log_sigma.data()) {
            double s = std::exp(ls);
            if (!(s > 0.0) || !std::isfinite(s)) throw InvalidDistribution("sigma = exp(log_sigma) must be positive and finite");
        }
        if (family == Family::StudentT) {
            if (!(nu > 0.0) || !std::isfinite(nu)) throw InvalidDistribution("nu must be positive");
            if (!(nu + static_cast<double>(n()) > 2.0)) throw InvalidDistribution("nu + n must exceed 2");
        }
    }

    // Marginal variance of one coordinate when sigma = 1.
    double unit_marginal_variance() const {
        if (family == Family::Gaussian) return 1.0;
        double dn = static_cast<double>(n());
        double df = nu + dn;
        return (1.0 / (1.0 + dn / nu)) * df / (df - 2.0);
    }
};

// The parameter-free randomness behind one reparameterized sample.
struct ReparamNoise {
    Tensor eps;                  // m x n standard normal
    std::optional<Tensor> delta; // m x 1 chi-square(nu + n), StudentT only
};

inline ReparamNoise draw_noise(const PromptDistribution& d, Rng& rng) {
    ReparamNoise noise{normal(rng, d.mu.shape()), std::nullopt};
    if (d.family == Family::StudentT)
        noise.delta = chi_square(rng, d.nu + static_cast<double>(d.n()), Shape{d.rows(), 1});
    return noise;
}

// Per-entry multiplier applied to sigma: eps times the t mixing factor.
inline Tensor noise_multiplier(const PromptDistribution& d, const ReparamNoise& noise) {
    if (d.family == Family::Gaussian) return noise.eps;
    if (!noise.delta) throw InvalidDistribution("StudentT sample needs a chi-square draw");
    const double dn = static_cast<double>(d.n());
    const double df = d.nu + dn;
    const double shrink = 1.0 / std::sqrt(1.0 + dn / d.nu);
    std::vector<double> v(noise.eps.numel());
    for (std::size_t r = 0; r < d.rows(); ++r) {
        double delta = (*noise.delta)[r];
        double mix = d.literal_multiplier ? df / std::sqrt(delta) : std::sqrt(df / delta);
        for (std::size_t c = 0; c < dn; ++c) v[r * d.n() + c] = mix * shrink * noise.eps[r * d.n() + c];
    }
    return Tensor(noise.eps.shape(), std::move(v));
}

// z as a differentiable function of (mu, log_sigma) with the noise frozen.
inline Tensor reparameterize(const PromptDistribution& d, const ReparamNoise& noise) {
    if (noise.eps.shape() != d.mu.shape()) throw InvalidDistribution("noise shape does not match mu");
    if (d.zero_noise) return d.mu + Tensor::zeros(d.mu.shape());
    return d.mu + exp(d.log_sigma) * noise_multiplier(d, noise);
}

inline Tensor sample_reparam(const PromptDistribution& d, Rng& rng) {
    d.validate();
    return reparameterize(d, draw_noise(d, rng));
}

// Inference uses the mean prompt only.
inline Tensor mean_prompt(const PromptDistribution& d) { return d.mu.detach(); }

struct ReparamGradReport {
    GradCheckResult mu;
    GradCheckResult log_sigma;
    double worst_rel_err() const { return std::max(mu.rel_err, log_sigma.rel_err); }
};

// Checks d(downstream(sample))/d(mu) and d/d(log_sigma) against central
// differences with the noise frozen; throws GradMismatch above tol.
inline ReparamGradReport grad_check_reparam(const PromptDistribution& d, const std::function<Tensor(const Tensor&)>& downstream,
                                            const ReparamNoise& noise, double tol = 1e-5, double h = 1e-4) {
    d.validate();
    auto as_fn = [&](bool wrt_mu) -> ScalarFn {
        return [&, wrt_mu](std::span<const Tensor> in) {
            PromptDistribution local = d;
            if (wrt_mu) local.mu = in[0];
            else local.log_sigma = in[0];
            return downstream(reparameterize(local, noise));
        };
    };
    ReparamGradReport r;
    std::vector<Tensor> mu{d.mu.detach()};
    std::vector<Tensor> ls{d.log_sigma.detach()};
    r.mu = check_gradients(as_fn(true), mu, h);
    r.log_sigma = check_gradients(as_fn(false), ls, h);
    if (!r.mu.passed(tol) || !r.log_sigma.passed(tol))
        throw GradMismatch("reparameterized gradient relative error " + std::to_string(r.worst_rel_err()));
    return r;
}

} // namespace varprompt

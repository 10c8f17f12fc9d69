#pragma once

// Prompt learners: plain gradient descent on z, and Monte Carlo optimization of
// a prompt distribution's (mu, log_sigma). Both are generic over the objective
// so the analytic landscapes reuse them unchanged.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "varprompt/decoder.hpp"
#include "varprompt/dist.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

enum class Algorithm { SGD, AdamW };
enum class Schedule { Constant, CosineWarmRestart };

inline std::string to_string(Algorithm a) { return a == Algorithm::SGD ? "sgd" : "adamw"; }
inline std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "cosine-restart"; }

inline Algorithm parse_algorithm(const std::string& s) {
    if (s == "sgd") return Algorithm::SGD;
    if (s == "adamw") return Algorithm::AdamW;
    throw InvalidParam("unknown optimizer '" + s + "'");
}

inline Schedule parse_schedule(const std::string& s) {
    if (s == "constant") return Schedule::Constant;
    if (s == "cosine-restart") return Schedule::CosineWarmRestart;
    throw InvalidParam("unknown schedule '" + s + "'");
}

struct OptimizerConfig {
    Algorithm algorithm = Algorithm::SGD;
    double lr = 0.05;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Schedule schedule = Schedule::Constant;
    std::size_t restart_period = 15;
};

class OptimizerState {
public:
    explicit OptimizerState(OptimizerConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw InvalidParam("learning rate must be positive");
        if (cfg.weight_decay < 0.0) throw InvalidParam("weight decay must be non-negative");
        if (cfg.schedule == Schedule::CosineWarmRestart && cfg.restart_period == 0)
            throw InvalidParam("restart period must be positive");
    }

    const OptimizerConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }

    // Learning rate used by the step with zero-based index `step`. The cosine
    // schedule anneals toward zero and jumps back to lr every period; the
    // phase stays below 1, so the rate never reaches zero.
    double lr_at(std::size_t step) const {
        if (cfg_.schedule == Schedule::Constant) return cfg_.lr;
        double phase = static_cast<double>(step % cfg_.restart_period) / static_cast<double>(cfg_.restart_period);
        return 0.5 * cfg_.lr * (1.0 + std::cos(std::numbers::pi * phase));
    }

    // Updates params in place from grads (one vector per param, same order on
    // every call).
    void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads) {
        if (params.size() != grads.size()) throw ShapeMismatch("params and grads differ in count");
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p.numel(), 0.0);
                v_.emplace_back(p.numel(), 0.0);
            }
        }
        if (m_.size() != params.size()) throw ShapeMismatch("parameter count changed between steps");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (grads[i].size() != params[i].numel() || m_[i].size() != params[i].numel())
                throw ShapeMismatch("gradient " + std::to_string(i) + " does not match its parameter");

        const double lr = lr_at(t_);
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto x = params[i].mutable_data();
            const auto& g = grads[i];
            for (std::size_t k = 0; k < x.size(); ++k) {
                if (cfg_.algorithm == Algorithm::SGD) {
                    x[k] -= lr * (g[k] + cfg_.weight_decay * x[k]);
                } else {
                    m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g[k];
                    v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                    double mh = m_[i][k] / bc1, vh = v_[i][k] / bc2;
                    x[k] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * x[k]);
                }
            }
        }
    }

    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    OptimizerConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Fires once `patience` consecutive epochs each failed to beat the best loss
// seen before them by at least min_improvement.
class StoppingRule {
public:
    StoppingRule(double min_improvement = 3e-4, std::size_t patience = 100)
        : min_improvement_(min_improvement), patience_(patience) {
        if (!(min_improvement >= 0.0)) throw InvalidParam("min improvement must be non-negative");
        if (patience == 0) throw InvalidParam("patience must be positive");
    }

    double min_improvement() const { return min_improvement_; }
    std::size_t patience() const { return patience_; }
    double best() const { return best_; }
    std::size_t stale() const { return stale_; }

    // Returns true when training should stop after this epoch.
    bool update(double loss) {
        if (!has_best_) {
            has_best_ = true;
            best_ = loss;
            return false;
        }
        const double gain = best_ - loss;
        // Relative slack so an improvement of exactly min_improvement counts
        // despite rounding in the subtraction.
        const double slack = 1e-12 * std::max(1.0, std::abs(best_));
        if (gain >= min_improvement_ - slack) stale_ = 0;
        else ++stale_;
        best_ = std::min(best_, loss);
        return stale_ >= patience_;
    }

    void reset() {
        has_best_ = false;
        best_ = 0.0;
        stale_ = 0;
    }

private:
    double min_improvement_;
    std::size_t patience_;
    bool has_best_ = false;
    double best_ = 0.0;
    std::size_t stale_ = 0;
};

enum class Mode { Vanilla, VariationalT, VariationalGaussian };

inline std::string to_string(Mode m) {
    switch (m) {
    case Mode::Vanilla: return "vanilla";
    case Mode::VariationalT: return "variational-t";
    case Mode::VariationalGaussian: return "variational-gaussian";
    }
    return "?";
}

enum class TrialStatus { Converged, MaxEpochs, Diverged };

inline std::string to_string(TrialStatus s) {
    switch (s) {
    case TrialStatus::Converged: return "converged";
    case TrialStatus::MaxEpochs: return "max-epochs";
    case TrialStatus::Diverged: return "diverged";
    }
    return "?";
}

struct MaskMetrics {
    double iou = 0.0;
    double bce = 0.0;
    double dice = 0.0;
};

struct TrainConfig {
    OptimizerConfig optimizer;
    double min_improvement = 3e-4;
    std::size_t patience = 100;
    std::size_t max_epochs = 20000;
    double init_std = 25.0;
    std::size_t mc_samples = 10;
    double nu = 5.0;
    Family family = Family::StudentT;
    bool zero_noise = false;
    bool literal_multiplier = false;

    std::string describe() const {
        std::string s = "opt=" + to_string(optimizer.algorithm) + " lr=" + std::to_string(optimizer.lr) +
                        " wd=" + std::to_string(optimizer.weight_decay) + " sched=" + to_string(optimizer.schedule) +
                        " delta=" + std::to_string(min_improvement) + " patience=" + std::to_string(patience) +
                        " max_epochs=" + std::to_string(max_epochs) + " init_std=" + std::to_string(init_std) +
                        " K=" + std::to_string(mc_samples) + " nu=" + std::to_string(nu) + " family=" + to_string(family);
        if (zero_noise) s += " zero_noise";
        if (literal_multiplier) s += " literal_multiplier";
        return s;
    }
};

struct TrialRecord {
    std::size_t trial_id = 0;
    std::uint64_t seed = 0;
    Mode mode = Mode::Vanilla;
    std::string config;
    std::vector<double> loss_trace;
    Tensor z;          // vanilla optimum, or the mean prompt
    Tensor sigma;      // variational only
    std::size_t epochs_run = 0;
    TrialStatus status = TrialStatus::Converged;
    std::string failure;
    std::optional<MaskMetrics> metrics;          // mean-prompt / optimum metrics
    std::optional<MaskMetrics> sampled_metrics;  // averaged over K sampled prompts

    double final_loss() const { return loss_trace.empty() ? NAN : loss_trace.back(); }
    double best_loss() const {
        double b = INFINITY;
        for (double l : loss_trace) b = std::min(b, l);
        return b;
    }
};

using Objective = std::function<Tensor(const Tensor&)>;

// Stream layout shared by both learners so a zero-noise variational run sees
// the same initial point as the vanilla run with the same seed.
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kNoiseStream = 1;
inline constexpr std::uint64_t kEvalStream = 2;

inline Tensor init_prompt(Rng rng, const Shape& shape, double init_std) {
    Rng init = rng.child(kInitStream);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = init_std * init.normal();
    return Tensor(shape, std::move(v), true);
}

namespace detail {

inline void finish_divergence(TrialRecord& rec, const std::exception& e) {
    rec.status = TrialStatus::Diverged;
    rec.failure = e.what();
}

} // namespace detail

// Minimizes objective(z) directly. `init` overrides the random start.
inline TrialRecord optimize_vanilla(const Objective& objective, const Shape& shape, Rng rng, const TrainConfig& cfg,
                                    std::optional<Tensor> init = std::nullopt) {
    TrialRecord rec;
    rec.seed = rng.seed();
    rec.mode = Mode::Vanilla;
    rec.config = cfg.describe();
    std::vector<Tensor> params{init ? init->clone_leaf(true) : init_prompt(rng, shape, cfg.init_std)};
    OptimizerState opt(cfg.optimizer);
    StoppingRule stop(cfg.min_improvement, cfg.patience);
    rec.status = TrialStatus::MaxEpochs;
    try {
        for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            params[0].zero_grad();
            Tensor loss = objective(params[0]);
            loss.backward();
            rec.loss_trace.push_back(loss.item());
            opt.step(params, {params[0].grad_vector()});
            if (stop.update(loss.item())) {
                rec.status = TrialStatus::Converged;
                break;
            }
        }
    } catch (const NonFiniteValue& e) {
        detail::finish_divergence(rec, e);
    } catch (const DomainError& e) {
        detail::finish_divergence(rec, e);
    }
    rec.epochs_run = rec.loss_trace.size();
    rec.z = params[0].detach();
    return rec;
}

// Per epoch: K reparameterized samples, mean objective, one step on
// (mu, log_sigma). rec.z is the mean prompt.
inline TrialRecord optimize_variational(const Objective& objective, const Shape& shape, Rng rng, const TrainConfig& cfg,
                                        std::optional<Tensor> init = std::nullopt) {
    if (cfg.mc_samples == 0) throw InvalidParam("K must be at least 1");
    TrialRecord rec;
    rec.seed = rng.seed();
    rec.mode = cfg.family == Family::StudentT ? Mode::VariationalT : Mode::VariationalGaussian;
    rec.config = cfg.describe();
    PromptDistribution d;
    d.mu = init ? init->clone_leaf(true) : init_prompt(rng, shape, cfg.init_std);
    d.log_sigma = Tensor::zeros(d.mu.shape(), true);
    d.nu = cfg.nu;
    d.family = cfg.family;
    d.zero_noise = cfg.zero_noise;
    d.literal_multiplier = cfg.literal_multiplier;
    d.validate();

    Rng noise_rng = rng.child(kNoiseStream);
    OptimizerState opt(cfg.optimizer);
    StoppingRule stop(cfg.min_improvement, cfg.patience);
    const double inv_k = 1.0 / static_cast<double>(cfg.mc_samples);
    rec.status = TrialStatus::MaxEpochs;
    try {
        for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            d.mu.zero_grad();
            d.log_sigma.zero_grad();
            std::optional<Tensor> total;
            for (std::size_t k = 0; k < cfg.mc_samples; ++k) {
                Tensor l = objective(reparameterize(d, draw_noise(d, noise_rng)));
                total = total ? *total + l : l;
            }
            Tensor loss = *total * inv_k;
            loss.backward();
            rec.loss_trace.push_back(loss.item());
            std::vector<Tensor> params{d.mu, d.log_sigma};
            auto g_ls = d.log_sigma.has_grad() ? d.log_sigma.grad_vector() : std::vector<double>(d.log_sigma.numel(), 0.0);
            opt.step(params, {d.mu.grad_vector(), std::move(g_ls)});
            if (stop.update(loss.item())) {
                rec.status = TrialStatus::Converged;
                break;
            }
        }
    } catch (const NonFiniteValue& e) {
        detail::finish_divergence(rec, e);
    } catch (const DomainError& e) {
        detail::finish_divergence(rec, e);
    }
    rec.epochs_run = rec.loss_trace.size();
    rec.z = mean_prompt(d);
    rec.sigma = exp(d.log_sigma.detach());
    return rec;
}

// Loss of every row of a K x n batch: Tensor[K x n] -> Tensor[K].
using RowObjective = std::function<Tensor(const Tensor&)>;

// Single-prompt form of optimize_variational that scores all K samples in one
// batched call; it consumes the noise stream exactly as the per-sample form.
inline TrialRecord optimize_variational_rows(const RowObjective& rows, std::size_t n, Rng rng, const TrainConfig& cfg,
                                             std::optional<Tensor> init = std::nullopt) {
    if (cfg.mc_samples == 0) throw InvalidParam("K must be at least 1");
    TrialRecord rec;
    rec.seed = rng.seed();
    rec.mode = cfg.family == Family::StudentT ? Mode::VariationalT : Mode::VariationalGaussian;
    rec.config = cfg.describe();
    const Shape shape{1, n};
    PromptDistribution d;
    d.mu = init ? init->clone_leaf(true) : init_prompt(rng, shape, cfg.init_std);
    d.log_sigma = Tensor::zeros(d.mu.shape(), true);
    d.nu = cfg.nu;
    d.family = cfg.family;
    d.zero_noise = cfg.zero_noise;
    d.literal_multiplier = cfg.literal_multiplier;
    d.validate();

    const std::size_t K = cfg.mc_samples;
    Rng noise_rng = rng.child(kNoiseStream);
    OptimizerState opt(cfg.optimizer);
    StoppingRule stop(cfg.min_improvement, cfg.patience);
    const double inv_k = 1.0 / static_cast<double>(K);
    std::vector<double> mult(K * n);
    rec.status = TrialStatus::MaxEpochs;
    try {
        for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            d.mu.zero_grad();
            d.log_sigma.zero_grad();
            for (std::size_t k = 0; k < K; ++k) {
                Tensor m = noise_multiplier(d, draw_noise(d, noise_rng));
                std::copy(m.data().begin(), m.data().end(), mult.begin() + static_cast<std::ptrdiff_t>(k * n));
            }
            Tensor z = d.zero_noise ? d.mu + Tensor::zeros(Shape{K, n}) : d.mu + exp(d.log_sigma) * Tensor(Shape{K, n}, mult);
            Tensor loss = sum(rows(z)) * inv_k;
            loss.backward();
            rec.loss_trace.push_back(loss.item());
            std::vector<Tensor> params{d.mu, d.log_sigma};
            auto g_ls = d.log_sigma.has_grad() ? d.log_sigma.grad_vector() : std::vector<double>(d.log_sigma.numel(), 0.0);
            opt.step(params, {d.mu.grad_vector(), std::move(g_ls)});
            if (stop.update(loss.item())) {
                rec.status = TrialStatus::Converged;
                break;
            }
        }
    } catch (const NonFiniteValue& e) {
        detail::finish_divergence(rec, e);
    } catch (const DomainError& e) {
        detail::finish_divergence(rec, e);
    }
    rec.epochs_run = rec.loss_trace.size();
    rec.z = mean_prompt(d);
    rec.sigma = exp(d.log_sigma.detach());
    return rec;
}

inline MaskMetrics mask_metrics(const ToyTask& task, const Tensor& z) {
    MaskGrid logits = task.decoder->decode(z.detach());
    return MaskMetrics{iou(logits.binarize(), task.target), bce_loss(logits, task.target).item(),
                       dice_loss(logits, task.target).item()};
}

// Mask-task wrappers: attach IoU/BCE/Dice of the result.
inline TrialRecord optimize_vanilla(const ToyTask& task, Rng rng, const TrainConfig& cfg,
                                    std::optional<Tensor> init = std::nullopt) {
    TrialRecord rec = optimize_vanilla([&](const Tensor& z) { return task.loss(z); }, Shape{task.spec.m, task.spec.n},
                                       rng, cfg, std::move(init));
    rec.metrics = mask_metrics(task, rec.z);
    return rec;
}

inline TrialRecord optimize_variational(const ToyTask& task, Rng rng, const TrainConfig& cfg,
                                        std::optional<Tensor> init = std::nullopt) {
    TrialRecord rec = optimize_variational([&](const Tensor& z) { return task.loss(z); },
                                           Shape{task.spec.m, task.spec.n}, rng, cfg, std::move(init));
    rec.metrics = mask_metrics(task, rec.z);
    if (rec.status != TrialStatus::Diverged) {
        PromptDistribution d;
        d.mu = rec.z;
        d.log_sigma = log(rec.sigma);
        d.nu = cfg.nu;
        d.family = cfg.family;
        d.zero_noise = cfg.zero_noise;
        d.literal_multiplier = cfg.literal_multiplier;
        Rng eval = rng.child(kEvalStream);
        MaskMetrics acc;
        for (std::size_t k = 0; k < cfg.mc_samples; ++k) {
            MaskMetrics m = mask_metrics(task, reparameterize(d, draw_noise(d, eval)));
            acc.iou += m.iou;
            acc.bce += m.bce;
            acc.dice += m.dice;
        }
        const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
        rec.sampled_metrics = MaskMetrics{acc.iou * inv, acc.bce * inv, acc.dice * inv};
    }
    return rec;
}

} // namespace varprompt

#pragma once

// Minimal encoder mode: frozen query features Q (m x c) are mapped to the
// prompt distribution by two linear heads,
//
//     mu = Q W_mu + b_mu,    log_sigma = Q W_sigma + b_sigma,
//
// and only the head weights are learned. The features stand in for the output
// of an attention stack and are drawn once per task.

#include <cmath>
#include <optional>
#include <vector>

#include "varprompt/decoder.hpp"
#include "varprompt/dist.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/optim.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

struct LinearHeads {
    Tensor w_mu;     // c x n
    Tensor b_mu;     // 1 x n
    Tensor w_sigma;  // c x n
    Tensor b_sigma;  // 1 x n

    // W_mu ~ N(0, init_std^2 / c) so mu has scale init_std for unit features;
    // the sigma head starts at zero (sigma = 1).
    static LinearHeads make(std::size_t c, std::size_t n, Rng rng, double init_std) {
        if (c == 0 || n == 0) throw InvalidParam("head dimensions must be positive");
        LinearHeads h;
        std::vector<double> w(c * n);
        const double s = init_std / std::sqrt(static_cast<double>(c));
        for (auto& x : w) x = s * rng.normal();
        h.w_mu = Tensor(Shape{c, n}, std::move(w), true);
        h.b_mu = Tensor::zeros(Shape{1, n}, true);
        h.w_sigma = Tensor::zeros(Shape{c, n}, true);
        h.b_sigma = Tensor::zeros(Shape{1, n}, true);
        return h;
    }

    std::size_t in_features() const { return w_mu.dim(0); }
    std::size_t n() const { return w_mu.dim(1); }

    std::vector<Tensor> params() const { return {w_mu, b_mu, w_sigma, b_sigma}; }

    PromptDistribution forward(const Tensor& queries, const TrainConfig& cfg) const {
        if (queries.rank() != 2 || queries.dim(1) != in_features())
            throw InvalidParam("queries must be m x " + std::to_string(in_features()) + ", got " +
                               shape_str(queries.shape()));
        PromptDistribution d;
        d.mu = matmul(queries, w_mu) + b_mu;
        d.log_sigma = matmul(queries, w_sigma) + b_sigma;
        d.nu = cfg.nu;
        d.family = cfg.family;
        d.zero_noise = cfg.zero_noise;
        d.literal_multiplier = cfg.literal_multiplier;
        d.validate();
        return d;
    }
};

inline constexpr std::uint64_t kQueryStream = 3;
inline constexpr std::uint64_t kHeadStream = 4;

inline Tensor query_features(Rng rng, std::size_t m, std::size_t c) { return normal(rng, Shape{m, c}); }

struct EncoderTrial {
    TrialRecord record;  // z is the mean prompt, sigma the predicted scale
    LinearHeads heads;
    Tensor queries;
};

// Trains the two heads on one mask task with the K-sample objective. The
// noise stream matches optimize_variational for the same rng.
inline EncoderTrial optimize_encoder(const ToyTask& task, Rng rng, const TrainConfig& cfg, std::size_t features) {
    if (cfg.mc_samples == 0) throw InvalidParam("K must be at least 1");
    EncoderTrial out;
    out.queries = query_features(rng.child(kQueryStream), task.spec.m, features);
    out.heads = LinearHeads::make(features, task.spec.n, rng.child(kHeadStream), cfg.init_std);
    TrialRecord& rec = out.record;
    rec.seed = rng.seed();
    rec.mode = cfg.family == Family::StudentT ? Mode::VariationalT : Mode::VariationalGaussian;
    rec.config = cfg.describe() + " encoder=" + std::to_string(features);

    Rng noise_rng = rng.child(kNoiseStream);
    OptimizerState opt(cfg.optimizer);
    StoppingRule stop(cfg.min_improvement, cfg.patience);
    const double inv_k = 1.0 / static_cast<double>(cfg.mc_samples);
    rec.status = TrialStatus::MaxEpochs;
    try {
        for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            std::vector<Tensor> params = out.heads.params();
            for (auto& p : params) p.zero_grad();
            PromptDistribution d = out.heads.forward(out.queries, cfg);
            std::optional<Tensor> total;
            for (std::size_t k = 0; k < cfg.mc_samples; ++k) {
                Tensor l = task.loss(reparameterize(d, draw_noise(d, noise_rng)));
                total = total ? *total + l : l;
            }
            Tensor loss = *total * inv_k;
            loss.backward();
            rec.loss_trace.push_back(loss.item());
            std::vector<std::vector<double>> grads;
            for (auto& p : params)
                grads.push_back(p.has_grad() ? p.grad_vector() : std::vector<double>(p.numel(), 0.0));
            opt.step(params, grads);
            if (stop.update(loss.item())) {
                rec.status = TrialStatus::Converged;
                break;
            }
        }
    } catch (const NonFiniteValue& e) {
        detail::finish_divergence(rec, e);
    } catch (const DomainError& e) {
        detail::finish_divergence(rec, e);
    } catch (const InvalidDistribution& e) {
        detail::finish_divergence(rec, e);
    }
    rec.epochs_run = rec.loss_trace.size();
    LinearHeads frozen{out.heads.w_mu.detach(), out.heads.b_mu.detach(), out.heads.w_sigma.detach(),
                       out.heads.b_sigma.detach()};
    PromptDistribution d;
    d.mu = matmul(out.queries, frozen.w_mu) + frozen.b_mu;
    d.log_sigma = matmul(out.queries, frozen.w_sigma) + frozen.b_sigma;
    rec.z = mean_prompt(d);
    rec.sigma = exp(d.log_sigma.detach());
    rec.metrics = mask_metrics(task, rec.z);
    return out;
}

} // namespace varprompt

#pragma once

// Seeded battery of gradient checks covering every differentiable operation.
// Case i picks operation i mod (number of ops) and draws its inputs from
// rng.child(i).

#include <functional>
#include <string>
#include <vector>

#include "varprompt/decoder.hpp"
#include "varprompt/dist.hpp"
#include "varprompt/gradcheck.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

struct GradCase {
    std::string op;
    ScalarFn fn;
    std::vector<Tensor> inputs;
};

struct GradCaseResult {
    std::size_t id = 0;
    std::string op;
    std::size_t params = 0;
    double rel_err = 0.0;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape s, double scale = 1.0, double offset = 0.0) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = offset + scale * rng.normal();
    return Tensor(std::move(s), std::move(v));
}

inline Tensor positive_tensor(Rng& rng, Shape s) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = 0.5 + 1.5 * rng.uniform();
    return Tensor(std::move(s), std::move(v));
}

// Weighted sum so every output entry has a distinct cotangent.
inline Tensor weighted(const Tensor& t, const Tensor& w) { return sum(t * w); }

using CaseMaker = std::function<GradCase(Rng&)>;

inline const std::vector<std::pair<std::string, CaseMaker>>& grad_case_makers() {
    static const std::vector<std::pair<std::string, CaseMaker>> makers{
        {"add-broadcast", [](Rng& r) {
             auto w = random_tensor(r, {3, 4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(x[0] + x[1], w); },
                             {random_tensor(r, {3, 4}), random_tensor(r, {1, 4})}};
         }},
        {"sub", [](Rng& r) {
             auto w = random_tensor(r, {2, 3});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(x[0] - x[1], w); },
                             {random_tensor(r, {2, 3}), random_tensor(r, {2, 1})}};
         }},
        {"mul", [](Rng& r) {
             auto w = random_tensor(r, {3, 3});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(x[0] * x[1], w); },
                             {random_tensor(r, {3, 3}), random_tensor(r, {3, 3})}};
         }},
        {"div", [](Rng& r) {
             auto w = random_tensor(r, {2, 4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(x[0] / x[1], w); },
                             {random_tensor(r, {2, 4}), positive_tensor(r, {1, 4})}};
         }},
        {"exp", [](Rng& r) {
             auto w = random_tensor(r, {5});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(exp(x[0]), w); }, {random_tensor(r, {5})}};
         }},
        {"log", [](Rng& r) {
             auto w = random_tensor(r, {5});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(log(x[0]), w); }, {positive_tensor(r, {5})}};
         }},
        {"tanh", [](Rng& r) {
             auto w = random_tensor(r, {6});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(tanh(x[0]), w); }, {random_tensor(r, {6})}};
         }},
        {"sigmoid", [](Rng& r) {
             auto w = random_tensor(r, {6});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(sigmoid(x[0]), w); },
                             {random_tensor(r, {6}, 3.0)}};
         }},
        {"softplus", [](Rng& r) {
             auto w = random_tensor(r, {6});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(softplus(x[0]), w); },
                             {random_tensor(r, {6}, 3.0)}};
         }},
        {"sqrt", [](Rng& r) {
             auto w = random_tensor(r, {4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(sqrt(x[0]), w); }, {positive_tensor(r, {4})}};
         }},
        {"neg", [](Rng& r) {
             auto w = random_tensor(r, {4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(-x[0], w); }, {random_tensor(r, {4})}};
         }},
        {"sin-cos", [](Rng& r) {
             auto w = random_tensor(r, {4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(sin(x[0]) * cos(x[0]), w); },
                             {random_tensor(r, {4})}};
         }},
        {"matmul", [](Rng& r) {
             auto w = random_tensor(r, {3, 2});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(matmul(x[0], x[1]), w); },
                             {random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}};
         }},
        {"transpose-reshape", [](Rng& r) {
             auto w = random_tensor(r, {6});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(reshape(transpose(x[0]), Shape{6}), w); },
                             {random_tensor(r, {2, 3})}};
         }},
        {"sum-axis", [](Rng& r) {
             auto w = random_tensor(r, {4});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(square(sum(x[0], 0)), w); },
                             {random_tensor(r, {3, 4})}};
         }},
        {"mean-axis", [](Rng& r) {
             auto w = random_tensor(r, {3});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(square(mean(x[0], 1)), w); },
                             {random_tensor(r, {3, 4})}};
         }},
        {"max-axis", [](Rng& r) {
             auto w = random_tensor(r, {3});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(max(x[0], 1), w); },
                             {random_tensor(r, {3, 5})}};
         }},
        {"max-all", [](Rng& r) {
             return GradCase{"", [](std::span<const Tensor> x) { return square(max(x[0])); }, {random_tensor(r, {2, 5})}};
         }},
        {"norm", [](Rng& r) {
             return GradCase{"", [](std::span<const Tensor> x) { return norm(x[0]) * norm(x[0] + 1.0); },
                             {random_tensor(r, {5})}};
         }},
        {"row-norms", [](Rng& r) {
             auto w = random_tensor(r, {3});
             return GradCase{"", [w](std::span<const Tensor> x) { return weighted(row_norms(x[0]), w); },
                             {random_tensor(r, {3, 4})}};
         }},
        {"take-concat", [](Rng& r) {
             auto w = random_tensor(r, {4, 2});
             return GradCase{"",
                             [w](std::span<const Tensor> x) {
                                 return weighted(concat_rows({reshape(take(x[0], {4, 5, 0, 1}), Shape{2, 2}), x[1]}), w);
                             },
                             {random_tensor(r, {3, 2}), random_tensor(r, {2, 2})}};
         }},
        {"bce", [](Rng& r) {
             auto t = random_tensor(r, {4, 4});
             std::vector<double> b(16);
             for (std::size_t k = 0; k < 16; ++k) b[k] = t[k] > 0 ? 1.0 : 0.0;
             MaskGrid target{4, 4, Tensor(Shape{4, 4}, b), MaskKind::Binary};
             return GradCase{"",
                             [target](std::span<const Tensor> x) {
                                 return bce_loss(MaskGrid{4, 4, x[0], MaskKind::Logits}, target);
                             },
                             {random_tensor(r, {4, 4}, 3.0)}};
         }},
        {"dice", [](Rng& r) {
             auto t = random_tensor(r, {4, 4});
             std::vector<double> b(16);
             for (std::size_t k = 0; k < 16; ++k) b[k] = t[k] > 0 ? 1.0 : 0.0;
             MaskGrid target{4, 4, Tensor(Shape{4, 4}, b), MaskKind::Binary};
             return GradCase{"",
                             [target](std::span<const Tensor> x) {
                                 return dice_loss(MaskGrid{4, 4, x[0], MaskKind::Logits}, target);
                             },
                             {random_tensor(r, {4, 4}, 3.0)}};
         }},
        {"decoder-max", [](Rng& r) {
             TaskSpec spec{r.next_u64() >> 1, 2, 4, 6, 6, 3, Combine::MaxOverPrompts};
             auto task = std::make_shared<ToyTask>(make_task(spec));
             Tensor z = detail::random_tensor(r, {2, 4}, 0.05);
             return GradCase{"", [task](std::span<const Tensor> x) { return task->loss(x[0]); }, {z}};
         }},
        {"decoder-sum", [](Rng& r) {
             TaskSpec spec{r.next_u64() >> 1, 2, 4, 6, 6, 3, Combine::SumOverPrompts};
             auto task = std::make_shared<ToyTask>(make_task(spec));
             Tensor z = detail::random_tensor(r, {2, 4}, 0.05);
             return GradCase{"", [task](std::span<const Tensor> x) { return task->loss(x[0]); }, {z}};
         }},
        {"reparam-t", [](Rng& r) {
             PromptDistribution d = PromptDistribution::make(random_tensor(r, {2, 3}), 5.0, Family::StudentT);
             auto noise = std::make_shared<ReparamNoise>(draw_noise(d, r));
             auto w = random_tensor(r, {2, 3});
             return GradCase{"",
                             [d, noise, w](std::span<const Tensor> x) {
                                 PromptDistribution local = d;
                                 local.mu = x[0];
                                 local.log_sigma = x[1];
                                 return weighted(tanh(reparameterize(local, *noise)), w);
                             },
                             {random_tensor(r, {2, 3}), random_tensor(r, {2, 3}, 0.3)}};
         }},
        {"reparam-gaussian", [](Rng& r) {
             PromptDistribution d = PromptDistribution::make(random_tensor(r, {2, 3}), 5.0, Family::Gaussian);
             auto noise = std::make_shared<ReparamNoise>(draw_noise(d, r));
             auto w = random_tensor(r, {2, 3});
             return GradCase{"",
                             [d, noise, w](std::span<const Tensor> x) {
                                 PromptDistribution local = d;
                                 local.mu = x[0];
                                 local.log_sigma = x[1];
                                 return weighted(tanh(reparameterize(local, *noise)), w);
                             },
                             {random_tensor(r, {2, 3}), random_tensor(r, {2, 3}, 0.3)}};
         }},
    };
    return makers;
}

} // namespace detail

inline std::vector<std::string> grad_case_ops() {
    std::vector<std::string> out;
    for (auto& [name, _] : detail::grad_case_makers()) out.push_back(name);
    return out;
}

inline GradCase make_grad_case(std::size_t id, const Rng& rng) {
    const auto& makers = detail::grad_case_makers();
    Rng r = rng.child(id);
    GradCase c = makers[id % makers.size()].second(r);
    c.op = makers[id % makers.size()].first;
    return c;
}

inline GradCaseResult run_grad_case(std::size_t id, const Rng& rng, double h = 1e-4) {
    GradCase c = make_grad_case(id, rng);
    GradCheckResult r = check_gradients(c.fn, c.inputs, h);
    std::size_t params = 0;
    for (auto& t : c.inputs) params += t.numel();
    return GradCaseResult{id, c.op, params, r.rel_err};
}

} // namespace varprompt

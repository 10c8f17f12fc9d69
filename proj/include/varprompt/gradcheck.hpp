#pragma once

// Central finite-difference gradient checking. Only forward evaluations are
// used on the numeric side, so the comparison is independent of autodiff.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "varprompt/tensor.hpp"

namespace varprompt {

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

// ||a - b|| / max(||a||, ||b||, 1e-8), taken over the whole flattened gradient.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

struct GradCheckResult {
    std::vector<double> analytic;
    std::vector<double> numeric;
    double rel_err = 0.0;
    bool passed(double tol = 1e-5) const { return rel_err < tol; }
};

// Gradient of f with respect to every input (flattened in order), via central
// differences with step h.
inline std::vector<double> numeric_gradient(const ScalarFn& f, std::span<const Tensor> inputs, double h = 1e-4) {
    std::vector<Tensor> work;
    work.reserve(inputs.size());
    for (auto& t : inputs) work.push_back(t.clone_leaf(false));
    std::vector<double> out;
    for (std::size_t i = 0; i < work.size(); ++i) {
        for (std::size_t k = 0; k < work[i].numel(); ++k) {
            double x0 = work[i][k];
            work[i].mutable_data()[k] = x0 + h;
            double fp = f(work).item();
            work[i].mutable_data()[k] = x0 - h;
            double fm = f(work).item();
            work[i].mutable_data()[k] = x0;
            out.push_back((fp - fm) / (2.0 * h));
        }
    }
    return out;
}

inline std::vector<double> autodiff_gradient(const ScalarFn& f, std::span<const Tensor> inputs) {
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(t.clone_leaf(true));
    f(leaves).backward();
    std::vector<double> out;
    for (auto& l : leaves) {
        auto g = l.grad_vector();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

inline GradCheckResult check_gradients(const ScalarFn& f, std::span<const Tensor> inputs, double h = 1e-4) {
    GradCheckResult r;
    r.analytic = autodiff_gradient(f, inputs);
    r.numeric = numeric_gradient(f, inputs, h);
    r.rel_err = relative_error(r.analytic, r.numeric);
    return r;
}

} // namespace varprompt

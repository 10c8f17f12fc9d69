#include <gtest/gtest.h>

#include <cmath>

#include "varprompt/curvature.hpp"

using namespace varprompt;

TEST(Curvature, LaplacianFdOnClosedForms) {
    std::vector<double> z{0.3, -0.2, 0.5};
    for (const std::string name : {"norm-squared", "exp-sum", "cos-sum", "quartic", "cubic", "log1p-norm"}) {
        SmoothFunction f = smooth_function(name, 3);
        ASSERT_TRUE(f.exact_laplacian) << name;
        EXPECT_NEAR(laplacian_fd(f.value, z), f.exact_laplacian(z), 1e-6) << name;
    }
}

TEST(Curvature, QuadraticLaplacianIsTrace) {
    Rng r(3);
    auto A = random_symmetric(r, 5);
    SmoothFunction f = quadratic_function(A, 5);
    double tr = 0;
    for (int i = 0; i < 5; ++i) tr += A[i * 5 + i];
    std::vector<double> z{1, -2, 0.5, 3, -1};
    EXPECT_NEAR(laplacian_fd(f.value, z), tr, 1e-5);
    auto H = hessian_fd(f.value, z);
    for (int i = 0; i < 25; ++i) EXPECT_NEAR(H[i], A[i], 1e-4);
}

TEST(Curvature, ValueAndGraphPathsAgree) {
    std::vector<double> z{0.4, -0.1, 0.9, 0.2};
    for (auto& name : smooth_function_names()) {
        SmoothFunction f = smooth_function(name, 4, 11);
        double a = f.value(z);
        double b = f.graph(Tensor(Shape{4}, z)).item();
        EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(a))) << name;
    }
    EXPECT_THROW(smooth_function("nope", 4), InvalidParam);
}

TEST(Curvature, HutchinsonAgreesWithFd) {
    SmoothFunction f = smooth_function("mlp", 4, 5);
    std::vector<double> z{0.1, 0.2, -0.3, 0.4};
    Rng r(7);
    Estimate h = hutchinson_trace(f.graph, Tensor(Shape{4}, z), 1e-4, 4000, r);
    double fd = laplacian_fd(f.value, z);
    EXPECT_LT(std::abs(h.value - fd), 4 * h.std_error + 1e-6);
    // Rademacher probes are exact for diagonal Hessians.
    SmoothFunction sep = smooth_function("exp-sum", 4);
    Rng r2(8);
    Estimate hs = hutchinson_trace(sep.graph, Tensor(Shape{4}, z), 1e-4, 16, r2);
    EXPECT_NEAR(hs.value, sep.exact_laplacian(z), 1e-6);
}

TEST(Curvature, NonFiniteInputIsRejected) {
    ValueFn bad = [](std::span<const double> z) { return z[0] > 0.5 ? NAN : 0.0; };
    std::vector<double> z{0.5};
    EXPECT_THROW(laplacian_fd(bad, z, 1e-3), NonFinite);
}

TEST(Curvature, UniformBallNoiseHasUnitCoordinateVariance) {
    Rng r(2);
    const int N = 100000, n = 3;
    std::vector<double> eps(n);
    double s2 = 0, maxr = 0;
    for (int i = 0; i < N; ++i) {
        draw_isotropic(r, NoiseKind::UniformBall, 0.5, eps);
        double rr = 0;
        for (double e : eps) rr += e * e;
        maxr = std::max(maxr, std::sqrt(rr));
        s2 += eps[0] * eps[0];
    }
    EXPECT_NEAR(s2 / N, 0.25, 0.01);
    EXPECT_LE(maxr, 0.5 * std::sqrt(n + 2.0) + 1e-12);
}

TEST(Curvature, Prop1QuadraticResidualWithinNoise) {
    SmoothFunction f = smooth_function("quadratic", 4, 3);
    std::vector<double> z{0.5, -1, 0.2, 0.1};
    Rng r(5);
    auto rep = verify_prop1(f.value, z, 0.1, 200000, r);
    EXPECT_LT(rep.residual_in_se(), 4.0);
    EXPECT_NEAR(rep.residual.value, rep.residual_recomputed(), 1e-15);
    EXPECT_EQ(rep.evaluations, 400000u);
}

TEST(Curvature, TaylorControlIsExactOnQuadratics) {
    SmoothFunction f = smooth_function("quadratic", 4, 3);
    std::vector<double> z{0.5, -1, 0.2, 0.1};
    Rng r(5);
    Prop1Options o;
    o.taylor_control = true;
    auto rep = verify_prop1(f.value, z, 0.3, 1000, r, o);
    EXPECT_LT(std::abs(rep.residual.value), 1e-7);
}

TEST(Curvature, ScalingStudyValidatesSigmas) {
    SmoothFunction f = smooth_function("exp-sum", 2);
    std::vector<double> z{0, 0};
    Rng r(1);
    EXPECT_THROW(scaling_study(f.value, z, {0.1, 0.2, 0.3}, 100, r), InvalidParam);
    EXPECT_THROW(scaling_study(f.value, z, {0.1, 0.2, 0.3, 0.5}, 100, r), InvalidParam);
}

TEST(Curvature, ScalingOnQuadraticIsAtFloor) {
    SmoothFunction f = smooth_function("quadratic", 3, 2);
    std::vector<double> z{0.1, 0.2, 0.3};
    Rng r(1);
    Prop1Options o;
    o.taylor_control = true;
    auto s = scaling_study(f.value, z, {0.02, 0.05, 0.1, 0.2}, 2000, r, o);
    EXPECT_TRUE(s.exact);
    EXPECT_THROW(scaling_slope_or_throw(s), InsufficientSignal);
}

TEST(Curvature, FlatnessAtMaskOptimumIsFinite) {
    ToyTask task = make_task(TaskSpec{3, 2, 4, 6, 6, 3, Combine::SumOverPrompts});
    double lap = flatness_at(task, task.oracle_prompt * 0.01);
    EXPECT_TRUE(std::isfinite(lap));
    Rng r(4);
    Estimate h = flatness_hutchinson(task, task.oracle_prompt * 0.01, 200, r);
    EXPECT_LT(std::abs(h.value - lap), 5 * h.std_error + 1e-3 * std::max(1.0, std::abs(lap)));
}

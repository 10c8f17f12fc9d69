#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "varprompt/optim.hpp"

using namespace varprompt;

TEST(Stopping, ExactImprovementNeverFires) {
    StoppingRule s(1e-3, 5);
    double loss = 10.0;
    for (int i = 0; i < 1000; ++i) {
        ASSERT_FALSE(s.update(loss));
        loss -= 1e-3;
    }
}

TEST(Stopping, HalfImprovementFiresAfterPatience) {
    StoppingRule s(1e-3, 7);
    double loss = 1.0;
    EXPECT_FALSE(s.update(loss));
    for (int e = 1; e <= 7; ++e) {
        loss -= 5e-4;
        bool fired = s.update(loss);
        EXPECT_EQ(fired, e == 7) << e;
    }
}

TEST(Stopping, WorseLossesCountAsStale) {
    StoppingRule s(0.0, 3);
    s.update(1.0);
    EXPECT_FALSE(s.update(2.0));
    EXPECT_FALSE(s.update(0.5));  // improvement resets
    EXPECT_FALSE(s.update(0.6));
    EXPECT_FALSE(s.update(0.7));
    EXPECT_TRUE(s.update(0.8));
    s.reset();
    EXPECT_FALSE(s.update(5.0));
}

TEST(Stopping, InvalidParameters) {
    EXPECT_THROW(StoppingRule(-1.0, 3), InvalidParam);
    EXPECT_THROW(StoppingRule(1e-3, 0), InvalidParam);
}

TEST(Optimizer, SgdWithWeightDecay) {
    OptimizerConfig c;
    c.lr = 0.1;
    c.weight_decay = 0.5;
    OptimizerState opt(c);
    std::vector<Tensor> p{Tensor(Shape{2}, {1.0, -2.0})};
    opt.step(p, {{0.3, 0.4}});
    EXPECT_NEAR(p[0][0], 1.0 - 0.1 * (0.3 + 0.5 * 1.0), 1e-15);
    EXPECT_NEAR(p[0][1], -2.0 - 0.1 * (0.4 - 0.5 * 2.0), 1e-15);
}

TEST(Optimizer, AdamWMatchesHandRolledSteps) {
    OptimizerConfig c;
    c.algorithm = Algorithm::AdamW;
    c.lr = 0.01;
    c.weight_decay = 0.1;
    OptimizerState opt(c);
    std::vector<Tensor> p{Tensor(Shape{1}, {0.5})};
    double x = 0.5, m = 0, v = 0;
    const double grads[] = {0.2, -0.1, 0.3};
    for (int t = 1; t <= 3; ++t) {
        double g = grads[t - 1];
        opt.step(p, {{g}});
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        x -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * x);
        EXPECT_NEAR(p[0][0], x, 1e-15);
    }
}

TEST(Optimizer, CosineWarmRestartSchedule) {
    OptimizerConfig c;
    c.lr = 0.2;
    c.schedule = Schedule::CosineWarmRestart;
    c.restart_period = 4;
    OptimizerState opt(c);
    EXPECT_DOUBLE_EQ(opt.lr_at(0), 0.2);
    EXPECT_NEAR(opt.lr_at(2), 0.1, 1e-15);
    EXPECT_NEAR(opt.lr_at(1), 0.1 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
    EXPECT_DOUBLE_EQ(opt.lr_at(4), 0.2);
    for (std::size_t s = 0; s < 20; ++s) EXPECT_GT(opt.lr_at(s), 0.0);
}

TEST(Optimizer, ParseNames) {
    EXPECT_EQ(parse_algorithm("adamw"), Algorithm::AdamW);
    EXPECT_EQ(parse_schedule("cosine-restart"), Schedule::CosineWarmRestart);
    EXPECT_THROW(parse_algorithm("rmsprop"), InvalidParam);
    EXPECT_THROW(OptimizerState(OptimizerConfig{Algorithm::SGD, -1.0}), InvalidParam);
}

TEST(Learners, VanillaConvergesOnQuadratic) {
    TrainConfig c;
    c.init_std = 1.0;
    c.optimizer.lr = 0.1;
    c.min_improvement = 1e-9;
    Objective f = [](const Tensor& z) { return sum((z - 1.0) * (z - 1.0)); };
    auto rec = optimize_vanilla(f, Shape{1, 3}, Rng(4), c);
    EXPECT_EQ(rec.status, TrialStatus::Converged);
    for (double v : rec.z.data()) EXPECT_NEAR(v, 1.0, 1e-5);
    EXPECT_EQ(rec.epochs_run, rec.loss_trace.size());
}

TEST(Learners, DivergenceIsRecordedNotThrown) {
    TrainConfig c;
    c.init_std = 1.0;
    c.optimizer.lr = 10.0;
    Objective f = [](const Tensor& z) { return sum(exp(z * z)); };
    auto rec = optimize_vanilla(f, Shape{1, 2}, Rng(4), c);
    EXPECT_EQ(rec.status, TrialStatus::Diverged);
    EXPECT_FALSE(rec.failure.empty());
}

TEST(Learners, ZeroNoiseGaussianKOneIsBitwiseVanilla) {
    ToyTask task = make_task(TaskSpec{5, 2, 6, 8, 8, 3, Combine::SumOverPrompts});
    TrainConfig c;
    c.max_epochs = 200;
    c.mc_samples = 1;
    c.family = Family::Gaussian;
    c.zero_noise = true;
    auto v = optimize_vanilla(task, Rng(77), c);
    auto w = optimize_variational(task, Rng(77), c);
    EXPECT_EQ(v.loss_trace, w.loss_trace);
    EXPECT_EQ(v.z.to_vector(), w.z.to_vector());
}

TEST(Learners, BatchedRowsMatchPerSampleObjective) {
    TrainConfig c;
    c.max_epochs = 50;
    c.init_std = 2.0;
    Objective f = [](const Tensor& z) { return sum(tanh(z) * z); };
    RowObjective rows = [](const Tensor& Z) { return sum(tanh(Z) * Z, 1); };
    auto a = optimize_variational(f, Shape{1, 4}, Rng(8), c);
    auto b = optimize_variational_rows(rows, 4, Rng(8), c);
    ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
    for (std::size_t i = 0; i < a.loss_trace.size(); ++i) EXPECT_NEAR(a.loss_trace[i], b.loss_trace[i], 1e-12);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.z[i], b.z[i], 1e-12);
}

TEST(Learners, MaskWrappersAttachMetrics) {
    ToyTask task = make_task(TaskSpec{6, 2, 6, 8, 8, 3, Combine::SumOverPrompts});
    TrainConfig c;
    c.max_epochs = 30;
    auto v = optimize_vanilla(task, Rng(1), c);
    auto w = optimize_variational(task, Rng(1), c);
    ASSERT_TRUE(v.metrics);
    ASSERT_TRUE(w.metrics);
    ASSERT_TRUE(w.sampled_metrics);
    EXPECT_FALSE(v.sampled_metrics);
    EXPECT_EQ(w.sigma.shape(), (Shape{2, 6}));
    EXPECT_GE(w.metrics->iou, 0.0);
    EXPECT_LE(w.metrics->iou, 1.0);
}

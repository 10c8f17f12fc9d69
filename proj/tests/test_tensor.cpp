#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "varprompt/gradcheck.hpp"
#include "varprompt/tensor.hpp"

using namespace varprompt;

namespace {

Tensor leaf(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v), true); }

} // namespace

TEST(Tensor, ConstructionChecksShapeAndFiniteness) {
    EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), ShapeMismatch);
    EXPECT_THROW(Tensor(Shape{2}, {1, NAN}), NonFiniteValue);
    EXPECT_THROW(Tensor(Shape{1}, {INFINITY}), NonFiniteValue);
    Tensor s = Tensor::scalar(3.5);
    EXPECT_EQ(s.rank(), 0u);
    EXPECT_DOUBLE_EQ(s.item(), 3.5);
}

TEST(Tensor, BroadcastingAlignsTrailingAxes) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b(Shape{3}, {10, 20, 30});
    Tensor c = a + b;
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.to_vector(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    Tensor col(Shape{2, 1}, {100, 200});
    EXPECT_EQ((a * col).to_vector(), (std::vector<double>{100, 200, 300, 800, 1000, 1200}));
    EXPECT_THROW(a + Tensor(Shape{2}, {1, 2}), ShapeMismatch);
}

TEST(Tensor, BroadcastGradientsSumOverStretchedAxes) {
    Tensor a = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = leaf({1, 3}, {1, 1, 1});
    sum(a * b).backward();
    EXPECT_EQ(b.grad_vector(), (std::vector<double>{5, 7, 9}));
    EXPECT_EQ(a.grad_vector(), (std::vector<double>{1, 1, 1, 1, 1, 1}));
}

TEST(Tensor, MaxTieBreaksToLowestIndex) {
    Tensor a = leaf({4}, {2, 5, 5, 1});
    max(a).backward();
    EXPECT_EQ(a.grad_vector(), (std::vector<double>{0, 1, 0, 0}));
    Tensor m = leaf({2, 3}, {7, 7, 7, 1, 3, 3});
    sum(max(m, 1)).backward();
    EXPECT_EQ(m.grad_vector(), (std::vector<double>{1, 0, 0, 0, 1, 0}));
}

TEST(Tensor, ReductionsOverAxes) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(sum(a, 0).to_vector(), (std::vector<double>{5, 7, 9}));
    EXPECT_EQ(sum(a, 1).to_vector(), (std::vector<double>{6, 15}));
    EXPECT_EQ(mean(a, 1).to_vector(), (std::vector<double>{2, 5}));
    EXPECT_EQ(max(a, 0).to_vector(), (std::vector<double>{4, 5, 6}));
    EXPECT_DOUBLE_EQ(sum(a).item(), 21.0);
    EXPECT_THROW(sum(a, 2), InvalidAxis);
}

TEST(Tensor, MatmulValuesAndShapes) {
    Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b(Shape{3, 2}, {7, 8, 9, 10, 11, 12});
    EXPECT_EQ(matmul(a, b).to_vector(), (std::vector<double>{58, 64, 139, 154}));
    EXPECT_THROW(matmul(a, a), ShapeMismatch);
    EXPECT_EQ(transpose(a).to_vector(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
}

TEST(Tensor, DomainErrorsAndNonFiniteResults) {
    EXPECT_THROW(log(Tensor(Shape{1}, {-1.0})), DomainError);
    EXPECT_THROW(sqrt(Tensor(Shape{1}, {-1.0})), DomainError);
    EXPECT_THROW(exp(Tensor(Shape{1}, {1000.0})), NonFiniteValue);
    EXPECT_THROW(Tensor(Shape{1}, {1.0}) / Tensor(Shape{1}, {0.0}), Error);
}

TEST(Tensor, BackwardNeedsScalarRoot) {
    Tensor a = leaf({2}, {1, 2});
    EXPECT_THROW((a * 2.0).backward(), NonScalarRoot);
}

TEST(Tensor, StableSoftplusAndSigmoidAtExtremes) {
    Tensor x(Shape{4}, {-800, -30, 30, 800});
    auto sp = softplus(x).to_vector();
    EXPECT_NEAR(sp[0], 0.0, 1e-300);
    EXPECT_NEAR(sp[3], 800.0, 1e-12);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(sp[i], oracle::softplus(x[i]), 1e-12 * std::max(1.0, sp[i]));
    auto sg = sigmoid(x).to_vector();
    EXPECT_EQ(sg[0], 0.0);
    EXPECT_EQ(sg[3], 1.0);
}

TEST(Tensor, GraphIsTopologicallyOrdered) {
    Tensor a = leaf({3}, {1, 2, 3});
    Tensor b = a * a;
    Tensor c = sum(exp(b) + b * a);
    Graph g = Graph::trace(c);
    EXPECT_TRUE(g.topologically_ordered());
    EXPECT_EQ(g.kind(g.size() - 1), OpKind::Sum);
}

TEST(Tensor, SharedSubexpressionAccumulatesOnce) {
    Tensor a = leaf({1}, {3});
    Tensor b = a * a;
    sum(b + b).backward();
    EXPECT_DOUBLE_EQ(a.grad_vector()[0], 12.0);
}

// Composite expression against a plain-double central difference.
TEST(Tensor, CompositeGradientMatchesIndependentOracle) {
    std::vector<double> x0{0.3, -1.2, 0.7, 2.0};
    auto plain = [](const std::vector<double>& x) {
        double s = 0;
        for (std::size_t i = 0; i < 4; ++i) s += std::tanh(x[i]) * oracle::sigmoid(x[(i + 1) % 4]) + 0.5 * x[i] * x[i];
        return std::log1p(s * s);
    };
    Tensor x = leaf({4}, x0);
    Tensor rolled = concat_rows({reshape(take(x, {1, 2, 3, 0}), Shape{1, 4})});
    Tensor s = sum(tanh(x) * reshape(sigmoid(rolled), Shape{4}) + 0.5 * x * x);
    log(1.0 + s * s).backward();
    auto want = oracle::central_gradient(plain, x0);
    EXPECT_LT(oracle::max_abs_diff(x.grad_vector(), want), 1e-8);
}

TEST(Tensor, RowNormsZeroRowHasZeroSubgradient) {
    Tensor a = leaf({2, 2}, {0, 0, 3, 4});
    Tensor r = row_norms(a);
    EXPECT_EQ(r.to_vector(), (std::vector<double>{0, 5}));
    sum(r).backward();
    auto g = a.grad_vector();
    EXPECT_EQ(g[0], 0.0);
    EXPECT_EQ(g[1], 0.0);
    EXPECT_NEAR(g[2], 0.6, 1e-15);
    EXPECT_NEAR(g[3], 0.8, 1e-15);
}

TEST(GradCheck, RelativeErrorIsNormWise) {
    std::vector<double> a{1, 0}, b{1, 1e-3};
    EXPECT_NEAR(relative_error(a, b), 1e-3 / std::sqrt(1 + 1e-6), 1e-12);
    std::vector<double> z{0, 0};
    EXPECT_DOUBLE_EQ(relative_error(z, z), 0.0);
}

TEST(GradCheck, CatchesWrongGradient) {
    // A deliberately wrong analytic gradient: detach one factor.
    ScalarFn f = [](std::span<const Tensor> x) { return sum(x[0] * x[0].detach()); };
    std::vector<Tensor> in{Tensor(Shape{3}, {1, 2, 3})};
    auto r = check_gradients(f, in);
    EXPECT_FALSE(r.passed());
}

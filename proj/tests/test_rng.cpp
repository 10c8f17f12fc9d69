#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "varprompt/rng.hpp"

using namespace varprompt;

// Published Philox4x32-10 known-answer vectors.
TEST(Rng, PhiloxKnownAnswers) {
    auto zero = detail::philox4x32_10({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(zero, (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    auto ones = detail::philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(ones, (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    auto pi = detail::philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(pi, (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameSeedSameStream) {
    Rng a(321), b(321);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(322);
    Rng d(321);
    int same = 0;
    for (int i = 0; i < 100; ++i) same += c.next_u64() == d.next_u64();
    EXPECT_EQ(same, 0);
}

TEST(Rng, ChildrenAreDistinctAndDoNotAdvanceParent) {
    Rng parent(321);
    Rng copy = parent;
    std::set<std::uint64_t> firsts;
    for (std::uint64_t i = 0; i < 64; ++i) firsts.insert(parent.child(i).next_u64());
    EXPECT_EQ(firsts.size(), 64u);
    EXPECT_EQ(parent.next_u64(), copy.next_u64());
    EXPECT_EQ(parent.child(5).next_u64(), Rng(321).child(5).next_u64());
}

TEST(Rng, UniformRanges) {
    Rng r(7);
    for (int i = 0; i < 100000; ++i) {
        double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        double v = r.uniform_open();
        ASSERT_GT(v, 0.0);
        ASSERT_LT(v, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(11);
    const int N = 400000;
    double s = 0, s2 = 0, s4 = 0;
    for (int i = 0; i < N; ++i) {
        double x = r.normal();
        s += x;
        s2 += x * x;
        s4 += x * x * x * x;
    }
    EXPECT_NEAR(s / N, 0.0, 5 * std::sqrt(1.0 / N));
    EXPECT_NEAR(s2 / N, 1.0, 5 * std::sqrt(2.0 / N));
    EXPECT_NEAR(s4 / N, 3.0, 5 * std::sqrt(96.0 / N));
}

TEST(Rng, GammaMomentsIncludingSmallShape) {
    for (double shape : {0.3, 1.0, 2.5, 9.0}) {
        Rng r(13, static_cast<std::uint64_t>(shape * 10));
        const int N = 200000;
        double s = 0, s2 = 0;
        for (int i = 0; i < N; ++i) {
            double g = r.gamma(shape);
            ASSERT_GT(g, 0.0);
            s += g;
            s2 += g * g;
        }
        double mean = s / N, var = s2 / N - mean * mean;
        EXPECT_NEAR(mean, shape, 5 * std::sqrt(shape / N)) << shape;
        EXPECT_NEAR(var, shape, 0.05 * shape) << shape;
    }
}

TEST(Rng, InvalidDegreesOfFreedom) {
    Rng r(1);
    EXPECT_THROW(r.chi_square(0.0), InvalidDf);
    EXPECT_THROW(r.chi_square(-2.0), InvalidDf);
    EXPECT_THROW(r.gamma(NAN), InvalidDf);
    EXPECT_THROW(chi_square(r, 0.0, Shape{3}), InvalidDf);
}

TEST(Rng, TensorSamplersHaveRequestedShape) {
    Rng r(3);
    EXPECT_EQ(normal(r, Shape{4, 5}).shape(), (Shape{4, 5}));
    Tensor c = chi_square(r, 9.0, Shape{2, 1});
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    for (double v : c.data()) EXPECT_GT(v, 0.0);
}

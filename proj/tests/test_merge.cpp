#include <gtest/gtest.h>

#include <cmath>

#include "varprompt/merge.hpp"
#include "oracles.hpp"

using namespace varprompt;

namespace {

ToyTask small_task() { return make_task(TaskSpec{17, 3, 4, 8, 8, 3, Combine::SumOverPrompts}); }

PromptDistribution spread_dist(const ToyTask& t, double log_sigma) {
    PromptDistribution d = PromptDistribution::make(t.oracle_prompt * 0.02);
    d.log_sigma = Tensor(d.mu.shape(), std::vector<double>(d.mu.numel(), log_sigma));
    return d;
}

// Reference merge computed directly from K probability grids.
std::vector<double> reference(MergeKind kind, const std::vector<std::vector<double>>& logits, double thr) {
    const std::size_t P = logits[0].size();
    const double K = static_cast<double>(logits.size());
    std::vector<double> out(P);
    for (std::size_t p = 0; p < P; ++p) {
        double mx = -INFINITY, ml = 0, mp = 0, votes = 0;
        for (auto& g : logits) {
            mx = std::max(mx, g[p]);
            ml += g[p] / K;
            double q = oracle::sigmoid(g[p]);
            mp += q / K;
            votes += q >= thr;
        }
        bool on = false;
        switch (kind) {
        case MergeKind::MaxLogit: on = oracle::sigmoid(mx) >= thr; break;
        case MergeKind::MeanLogit: on = oracle::sigmoid(ml) >= thr; break;
        case MergeKind::MaxBinary: on = votes >= 1; break;
        case MergeKind::MeanBinary: on = votes / K >= 0.5; break;
        case MergeKind::MajorityVote: on = votes * 2 > K || (votes * 2 == K && mp >= thr); break;
        default: break;
        }
        out[p] = on;
    }
    return out;
}

}  // namespace

TEST(Merge, NamesRoundTrip) {
    for (auto k : all_merge_kinds()) EXPECT_EQ(parse_merge(to_string(k)), k);
    EXPECT_THROW(parse_merge("median"), InvalidStrategy);
}

TEST(Merge, SampledStrategiesMatchReference) {
    ToyTask t = small_task();
    PromptDistribution d = spread_dist(t, -1.0);
    for (auto kind : all_merge_kinds()) {
        if (kind == MergeKind::MeanPromptOnly) continue;
        for (std::size_t K : {4u, 5u}) {
            Rng a(99), b(99);
            auto logits = sampled_logits(d, t, K, a);
            auto inf = infer(d, t, MergeStrategy{kind, K, 0.5}, b);
            EXPECT_EQ(inf.mask.values.to_vector(), reference(kind, logits, 0.5)) << to_string(kind) << " K=" << K;
            EXPECT_DOUBLE_EQ(inf.iou, iou(inf.mask, t.target));
        }
    }
}

TEST(Merge, MeanPromptOnlyIgnoresRng) {
    ToyTask t = small_task();
    PromptDistribution d = spread_dist(t, 0.0);
    Rng a(1), b(2);
    auto x = infer(d, t, MergeStrategy{MergeKind::MeanPromptOnly, 10, 0.5}, a);
    auto y = infer(d, t, MergeStrategy{MergeKind::MeanPromptOnly, 10, 0.5}, b);
    EXPECT_EQ(x.mask.values.to_vector(), y.mask.values.to_vector());
    auto expected = t.decoder->decode(d.mu.detach()).binarize(0.5).values.to_vector();
    EXPECT_EQ(x.mask.values.to_vector(), expected);
}

TEST(Merge, ZeroNoiseMakesEveryStrategyIdentical) {
    ToyTask t = small_task();
    PromptDistribution d = spread_dist(t, 0.5);
    d.zero_noise = true;
    Rng r0(0);
    auto base = infer(d, t, MergeStrategy{MergeKind::MeanPromptOnly, 1, 0.5}, r0).mask.values.to_vector();
    for (auto kind : all_merge_kinds()) {
        Rng r(5);
        auto m = infer(d, t, MergeStrategy{kind, 7, 0.5}, r).mask.values.to_vector();
        EXPECT_EQ(m, base) << to_string(kind);
    }
}

TEST(Merge, InvalidArguments) {
    ToyTask t = small_task();
    PromptDistribution d = spread_dist(t, 0.0);
    Rng r(1);
    EXPECT_THROW(infer(d, t, MergeStrategy{MergeKind::MaxLogit, 0, 0.5}, r), InvalidStrategy);
    EXPECT_THROW(infer(d, t, MergeStrategy{MergeKind::MaxLogit, 3, 1.0}, r), InvalidStrategy);
    EXPECT_THROW(infer(d, t, MergeStrategy{MergeKind::MaxLogit, 3, 0.0}, r), InvalidStrategy);
    PromptDistribution wrong = PromptDistribution::make(Tensor::zeros(Shape{2, 4}));
    EXPECT_THROW(infer(wrong, t, MergeStrategy{}, r), ShapeMismatch);
}

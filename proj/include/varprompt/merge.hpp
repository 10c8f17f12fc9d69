#pragma once

// Inference from a prompt distribution: decode the mean prompt, or sample K
// prompts and merge their K masks.

#include <algorithm>
#include <string>
#include <vector>

#include "varprompt/decoder.hpp"
#include "varprompt/dist.hpp"
#include "varprompt/errors.hpp"
#include "varprompt/rng.hpp"

namespace varprompt {

enum class MergeKind { MeanPromptOnly, MaxLogit, MeanLogit, MaxBinary, MeanBinary, MajorityVote };

inline const std::vector<MergeKind>& all_merge_kinds() {
    static const std::vector<MergeKind> kinds{MergeKind::MeanPromptOnly, MergeKind::MaxLogit,   MergeKind::MeanLogit,
                                              MergeKind::MaxBinary,      MergeKind::MeanBinary, MergeKind::MajorityVote};
    return kinds;
}

inline std::string to_string(MergeKind k) {
    switch (k) {
    case MergeKind::MeanPromptOnly: return "mean-prompt-only";
    case MergeKind::MaxLogit: return "max-logit";
    case MergeKind::MeanLogit: return "mean-logit";
    case MergeKind::MaxBinary: return "max-binary";
    case MergeKind::MeanBinary: return "mean-binary";
    case MergeKind::MajorityVote: return "majority-vote";
    }
    return "?";
}

inline MergeKind parse_merge(const std::string& s) {
    for (auto k : all_merge_kinds())
        if (to_string(k) == s) return k;
    throw InvalidStrategy("unknown merge strategy '" + s + "'");
}

struct MergeStrategy {
    MergeKind kind = MergeKind::MeanPromptOnly;
    std::size_t K = 10;  // ignored by mean-prompt-only
    double threshold = 0.5;
};

struct Inference {
    MaskGrid mask;
    double iou = 0.0;
};

// K logit grids from independent reparameterized samples.
inline std::vector<std::vector<double>> sampled_logits(const PromptDistribution& d, const ToyTask& task, std::size_t K, Rng& rng) {
    std::vector<std::vector<double>> out;
    out.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        Tensor z = reparameterize(d, draw_noise(d, rng)).detach();
        out.push_back(task.decoder->decode(z).values.to_vector());
    }
    return out;
}

inline Inference infer(const PromptDistribution& d, const ToyTask& task, const MergeStrategy& s, Rng& rng) {
    if (!(s.threshold > 0.0 && s.threshold < 1.0)) throw InvalidStrategy("threshold must lie in (0, 1)");
    if (s.kind != MergeKind::MeanPromptOnly && s.K == 0) throw InvalidStrategy("K must be at least 1");
    if (d.mu.rank() != 2 || d.mu.dim(0) != task.spec.m || d.mu.dim(1) != task.spec.n)
        throw ShapeMismatch("distribution " + shape_str(d.mu.shape()) + " does not match the task's prompts");
    d.validate();
    const std::size_t H = task.spec.height, W = task.spec.width, P = H * W;
    auto prob = [](double x) { return detail::stable_sigmoid(x); };
    std::vector<double> mask(P);
    if (s.kind == MergeKind::MeanPromptOnly) {
        auto logits = task.decoder->decode(mean_prompt(d)).values;
        for (std::size_t p = 0; p < P; ++p) mask[p] = prob(logits[p]) >= s.threshold ? 1.0 : 0.0;
    } else {
        auto grids = sampled_logits(d, task, s.K, rng);
        const double K = static_cast<double>(s.K);
        for (std::size_t p = 0; p < P; ++p) {
            double mx = -INFINITY, mean_logit = 0.0, mean_prob = 0.0;
            std::size_t votes = 0;
            for (auto& g : grids) {
                mx = std::max(mx, g[p]);
                mean_logit += g[p];
                double q = prob(g[p]);
                mean_prob += q;
                votes += q >= s.threshold;
            }
            mean_logit /= K;
            mean_prob /= K;
            bool on = false;
            switch (s.kind) {
            case MergeKind::MaxLogit: on = prob(mx) >= s.threshold; break;
            case MergeKind::MeanLogit: on = prob(mean_logit) >= s.threshold; break;
            case MergeKind::MaxBinary: on = votes > 0; break;
            case MergeKind::MeanBinary: on = static_cast<double>(votes) / K >= 0.5; break;
            case MergeKind::MajorityVote:
                if (2 * votes > s.K) on = true;
                else if (2 * votes < s.K) on = false;
                else on = mean_prob >= s.threshold;  // tie with even K
                break;
            case MergeKind::MeanPromptOnly: break;
            }
            mask[p] = on ? 1.0 : 0.0;
        }
    }
    MaskGrid grid{H, W, Tensor(Shape{H, W}, std::move(mask)), MaskKind::Binary};
    double score = iou(grid, task.target);
    return Inference{std::move(grid), score};
}

} // namespace varprompt

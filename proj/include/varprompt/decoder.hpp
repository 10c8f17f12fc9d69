#pragma once

// A frozen, seeded toy mask decoder and the mask losses it is trained with.
//
// Pixel p carries a feature vector f_p (i.i.d. noise, a per-channel offset and
// three low-frequency sinusoids, so masks form coherent blobs). The logit of p
// under prompt row z_i is (f_p . proj) . (mix . z_i); rows are combined by max
// (default) or sum. Because the map is linear in each row, any component of z
// orthogonal to the effective feature directions leaves the mask unchanged.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "varprompt/errors.hpp"
#include "varprompt/rng.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

enum class MaskKind { Logits, Probabilities, Binary };

struct MaskGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    Tensor values;  // height x width
    MaskKind kind = MaskKind::Logits;

    static MaskGrid make(Tensor values, MaskKind kind) {
        if (values.rank() != 2) throw ShapeMismatch("mask grid must be H x W, got " + shape_str(values.shape()));
        if (kind != MaskKind::Logits)
            for (double v : values.data()) {
                if (v < 0.0 || v > 1.0) throw DomainError("mask probabilities must lie in [0, 1]");
                if (kind == MaskKind::Binary && v != 0.0 && v != 1.0) throw DomainError("binary mask values must be 0 or 1");
            }
        return MaskGrid{values.dim(0), values.dim(1), std::move(values), kind};
    }

    MaskGrid to_probabilities() const {
        if (kind != MaskKind::Logits) throw DomainError("only logits convert to probabilities");
        return MaskGrid{height, width, sigmoid(values), MaskKind::Probabilities};
    }

    // Pixels with probability >= threshold become 1.
    MaskGrid threshold(double t = 0.5) const {
        if (kind != MaskKind::Probabilities) throw DomainError("only probabilities can be thresholded");
        std::vector<double> b(values.numel());
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = values[k] >= t ? 1.0 : 0.0;
        return MaskGrid{height, width, Tensor(values.shape(), std::move(b)), MaskKind::Binary};
    }

    MaskGrid binarize(double t = 0.5) const { return kind == MaskKind::Logits ? to_probabilities().threshold(t) : threshold(t); }

    std::size_t positives() const {
        std::size_t c = 0;
        for (double v : values.data()) c += v > 0.5;
        return c;
    }
};

enum class Combine { MaxOverPrompts, SumOverPrompts };

inline std::string to_string(Combine c) { return c == Combine::MaxOverPrompts ? "max" : "sum"; }

inline Combine parse_combine(const std::string& s) {
    if (s == "max") return Combine::MaxOverPrompts;
    if (s == "sum") return Combine::SumOverPrompts;
    throw InvalidParam("unknown combine '" + s + "'");
}

// Everything needed to regenerate a task; tasks are never stored densely.
struct TaskSpec {
    std::uint64_t seed = kDefaultSeed;
    std::size_t m = 4;
    std::size_t n = 16;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t features = 8;
    Combine combine = Combine::MaxOverPrompts;

    std::string serialize() const {
        std::ostringstream os;
        os << "seed=" << seed << " m=" << m << " n=" << n << " H=" << height << " W=" << width << " f=" << features
           << " combine=" << to_string(combine);
        return os.str();
    }

    static TaskSpec parse(const std::string& text) {
        TaskSpec s;
        std::istringstream is(text);
        std::string tok;
        int seen = 0;
        while (is >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos) throw InvalidParam("malformed task token '" + tok + "'");
            std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
            try {
                if (k == "seed") s.seed = std::stoull(v);
                else if (k == "m") s.m = std::stoull(v);
                else if (k == "n") s.n = std::stoull(v);
                else if (k == "H") s.height = std::stoull(v);
                else if (k == "W") s.width = std::stoull(v);
                else if (k == "f") s.features = std::stoull(v);
                else if (k == "combine") s.combine = parse_combine(v);
                else throw InvalidParam("unknown task key '" + k + "'");
            } catch (const std::logic_error&) {
                throw InvalidParam("bad value for task key '" + k + "'");
            }
            ++seen;
        }
        if (seen != 7) throw InvalidParam("task dump must list all seven fields");
        return s;
    }

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

class ToyDecoder {
public:
    // Scale of the decoder: mean norm of a pixel's effective direction.
    static constexpr double kGain = 50.0;
    // Std of the per-channel constant offset in the feature grid.
    static constexpr double kChannelOffset = 1.0;
    static constexpr double kSinusoidAmplitude = 1.0;

    ToyDecoder(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width, std::size_t features,
               Combine combine = Combine::MaxOverPrompts)
        : n_(n), height_(height), width_(width), features_(features), combine_(combine) {
        if (n == 0 || height == 0 || width == 0 || features == 0) throw InvalidParam("decoder extents must be positive");
        Rng rng(seed, 0x7DEC0DEull);
        const std::size_t hw = height * width;
        std::vector<double> grid(hw * features);
        for (auto& x : grid) x = rng.normal();
        for (std::size_t c = 0; c < features; ++c) {
            double offset = kChannelOffset * rng.normal();
            for (std::size_t p = 0; p < hw; ++p) grid[p * features + c] += offset;
            for (int j = 0; j < 3; ++j) {
                double kx = 3.0 * rng.uniform() - 1.5;
                double ky = 3.0 * rng.uniform() - 1.5;
                double phase = 2.0 * std::numbers::pi * rng.uniform();
                for (std::size_t y = 0; y < height; ++y)
                    for (std::size_t x = 0; x < width; ++x) {
                        double arg = 2.0 * std::numbers::pi *
                                         (kx * static_cast<double>(x) / static_cast<double>(width) +
                                          ky * static_cast<double>(y) / static_cast<double>(height)) +
                                     phase;
                        grid[(y * width + x) * features + c] += kSinusoidAmplitude * std::sin(arg);
                    }
            }
        }
        std::vector<double> proj(features * n), mix(n * n);
        for (auto& x : proj) x = rng.normal() / std::sqrt(static_cast<double>(features));
        for (auto& x : mix) x = rng.normal() / std::sqrt(static_cast<double>(n));

        feature_grid_ = Tensor(Shape{height, width, features}, grid);
        Tensor flat(Shape{hw, features}, std::move(grid));
        Tensor pm = matmul(Tensor(Shape{features, n}, proj), transpose(Tensor(Shape{n, n}, mix)));
        Tensor eff = matmul(flat, pm);
        // Fold the gain normalization into proj so logits keep the stated form.
        double mean_norm = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += eff[p * n + k] * eff[p * n + k];
            mean_norm += std::sqrt(s);
        }
        mean_norm /= static_cast<double>(hw);
        const double scale = kGain / mean_norm;
        for (auto& x : proj) x *= scale;
        proj_ = Tensor(Shape{features, n}, std::move(proj));
        mix_ = Tensor(Shape{n, n}, std::move(mix));
        effective_ = matmul(flat, matmul(proj_, transpose(mix_)));
    }

    std::size_t n() const { return n_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t features() const { return features_; }
    Combine combine() const { return combine_; }

    const Tensor& feature_grid() const { return feature_grid_; }
    const Tensor& proj() const { return proj_; }
    const Tensor& mix() const { return mix_; }
    // H*W x n matrix whose row p is the direction a prompt row is scored along.
    const Tensor& effective() const { return effective_; }

    MaskGrid decode(const Tensor& z) const {
        if (z.rank() != 2 || z.dim(1) != n_)
            throw ShapeMismatch("decode expects m x " + std::to_string(n_) + " prompts, got " + shape_str(z.shape()));
        Tensor per_prompt = matmul(effective_, transpose(z));  // HW x m
        Tensor combined = combine_ == Combine::MaxOverPrompts ? max(per_prompt, 1) : sum(per_prompt, 1);
        return MaskGrid{height_, width_, reshape(combined, Shape{height_, width_}), MaskKind::Logits};
    }

    // Logits of each prompt row separately: H*W x m.
    Tensor per_prompt_logits(const Tensor& z) const { return matmul(effective_, transpose(z)); }

private:
    std::size_t n_, height_, width_, features_;
    Combine combine_;
    Tensor feature_grid_, proj_, mix_, effective_;
};

inline void require_same_grid(const MaskGrid& a, const MaskGrid& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeMismatch("mask grids " + std::to_string(a.height) + "x" + std::to_string(a.width) + " and " +
                            std::to_string(b.height) + "x" + std::to_string(b.width));
}

// Mean pixel BCE from logits, evaluated as softplus(x) - t * x.
inline Tensor bce_loss(const MaskGrid& pred, const MaskGrid& target) {
    require_same_grid(pred, target);
    if (pred.kind != MaskKind::Logits) throw DomainError("bce_loss expects logits");
    return mean(softplus(pred.values) - target.values * pred.values);
}

inline constexpr double kDiceSmoothing = 1.0;

// 1 - (2 sum(p t) + s) / (sum p + sum t + s) with p = sigmoid(logits).
inline Tensor dice_loss(const MaskGrid& pred, const MaskGrid& target) {
    require_same_grid(pred, target);
    if (pred.kind != MaskKind::Logits) throw DomainError("dice_loss expects logits");
    Tensor p = sigmoid(pred.values);
    Tensor num = 2.0 * sum(p * target.values) + kDiceSmoothing;
    Tensor den = sum(p) + sum(target.values) + kDiceSmoothing;
    return 1.0 - num / den;
}

inline Tensor mask_loss(const MaskGrid& pred, const MaskGrid& target) { return bce_loss(pred, target) + dice_loss(pred, target); }

// |a & b| / |a | b|, 1 when both are empty.
inline double iou(const MaskGrid& pred, const MaskGrid& target) {
    require_same_grid(pred, target);
    if (pred.kind != MaskKind::Binary || target.kind != MaskKind::Binary) throw DomainError("iou expects binary masks");
    std::size_t inter = 0, uni = 0;
    for (std::size_t k = 0; k < pred.values.numel(); ++k) {
        bool a = pred.values[k] > 0.5, b = target.values[k] > 0.5;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct ToyTask {
    TaskSpec spec;
    std::shared_ptr<const ToyDecoder> decoder;
    MaskGrid target;
    Tensor oracle_prompt;

    Tensor loss(const Tensor& z) const { return mask_loss(decoder->decode(z), target); }
    double iou_of(const Tensor& z) const { return iou(decoder->decode(z.detach()).binarize(), target); }
    double positive_fraction() const {
        return static_cast<double>(target.positives()) / static_cast<double>(target.values.numel());
    }
};

inline constexpr int kTaskAttempts = 1000;
inline constexpr double kMinPositive = 0.05;
inline constexpr double kMaxPositive = 0.95;
// The oracle is rescaled so every pixel's logit is at least this far from 0.
inline constexpr double kOracleMargin = 40.0;

inline ToyTask make_task(const TaskSpec& spec) {
    if (spec.m == 0) throw InvalidParam("task needs at least one prompt");
    auto decoder = std::make_shared<const ToyDecoder>(spec.seed, spec.n, spec.height, spec.width, spec.features, spec.combine);
    const std::size_t hw = spec.height * spec.width;

    Rng rng(spec.seed, 0x0A4C1Eull);
    for (int attempt = 0; attempt < kTaskAttempts; ++attempt) {
        std::vector<double> z(spec.m * spec.n);
        for (auto& v : z) v = rng.normal();
        Tensor raw(Shape{spec.m, spec.n}, z);
        auto logits = decoder->decode(raw).values;
        double min_abs = INFINITY;
        for (double x : logits.data()) min_abs = std::min(min_abs, std::abs(x));
        if (!(min_abs > 1e-9)) continue;
        double scale = kOracleMargin / min_abs;
        if (!(scale * std::sqrt([&] { double s = 0; for (double v : z) s += v * v; return s; }()) < 1e12)) continue;
        for (auto& v : z) v *= scale;
        Tensor oracle(Shape{spec.m, spec.n}, std::move(z));
        MaskGrid target = decoder->decode(oracle).binarize();
        double frac = static_cast<double>(target.positives()) / static_cast<double>(hw);
        if (frac < kMinPositive || frac > kMaxPositive) continue;
        return ToyTask{spec, std::move(decoder), std::move(target), std::move(oracle)};
    }
    throw TaskGenerationFailed("no oracle prompt within the positive-pixel bounds after " + std::to_string(kTaskAttempts) +
                               " attempts for task " + spec.serialize());
}

inline ToyTask make_task(std::uint64_t seed, std::size_t m, std::size_t n, std::size_t height, std::size_t width,
                         std::size_t features, Combine combine = Combine::MaxOverPrompts) {
    return make_task(TaskSpec{seed, m, n, height, width, features, combine});
}

} // namespace varprompt

#pragma once

// Counter-based random streams (Philox4x32-10) and the primitive samplers used
// by the reparameterized prompt distributions.
//
// A stream is fully determined by (seed, stream id); the generator keeps only
// a block counter, so child streams for parallel trials are derived without
// touching the parent's sequence.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

#include "varprompt/errors.hpp"
#include "varprompt/tensor.hpp"

namespace varprompt {

inline constexpr std::uint64_t kDefaultSeed = 321;

namespace detail {

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            key[0] += W0;
            key[1] += W1;
        }
        std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
        std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
        auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed = kDefaultSeed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    // Independent stream keyed by (seed, stream, index).
    Rng child(std::uint64_t index) const {
        return Rng(seed_, detail::splitmix64(stream_ ^ detail::splitmix64(index + 0x632BE59BD9B4E019ull)));
    }

    std::uint64_t next_u64() {
        if (buffered_ == 0) refill();
        return buffer_[--buffered_];
    }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1), never exactly 0.
    double uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    // Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (spare_) {
            double s = *spare_;
            spare_.reset();
            return s;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        return r * std::cos(theta);
    }

    // Gamma(shape, scale 1) by Marsaglia-Tsang; shapes below 1 use the
    // Gamma(a) = Gamma(a + 1) * U^(1/a) boost.
    double gamma(double shape) {
        if (!(shape > 0.0) || !std::isfinite(shape)) throw InvalidDf("gamma shape must be positive and finite");
        if (shape < 1.0) {
            double g = gamma(shape + 1.0);
            return g * std::pow(uniform_open(), 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            double u = uniform_open();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double chi_square(double df) {
        if (!(df > 0.0) || !std::isfinite(df)) throw InvalidDf("chi-square degrees of freedom must be > 0");
        double x = 2.0 * gamma(0.5 * df);
        // Tiny df can underflow to zero; the law has no atom there.
        return x > 0.0 ? x : std::numeric_limits<double>::min();
    }

private:
    void refill() {
        std::array<std::uint32_t, 4> ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                         static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
        std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
        auto out = detail::philox4x32_10(ctr, key);
        ++block_;
        // Consumed back to front by next_u64().
        buffer_[1] = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
        buffer_[0] = (static_cast<std::uint64_t>(out[3]) << 32) | out[2];
        buffered_ = 2;
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t block_ = 0;
    std::array<std::uint64_t, 2> buffer_{};
    int buffered_ = 0;
    std::optional<double> spare_;
};

// I.i.d. standard normal entries; never part of a gradient graph.
inline Tensor normal(Rng& rng, const Shape& shape) {
    if (shape.empty()) throw ShapeMismatch("normal() needs a non-empty shape");
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor(shape, std::move(v));
}

// I.i.d. chi-square(df) entries, all strictly positive.
inline Tensor chi_square(Rng& rng, double df, const Shape& shape) {
    if (!(df > 0.0)) throw InvalidDf("df must be > 0, got " + std::to_string(df));
    if (shape.empty()) throw ShapeMismatch("chi_square() needs a non-empty shape");
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.chi_square(df);
    return Tensor(shape, std::move(v));
}

} // namespace varprompt

#pragma once

// Deterministic, portable pseudorandom generator.
//
// Algorithm: SplitMix64 (Steele, Lea, Flood 2014). Each generator owns a
// single 64-bit state advanced by the golden-gamma increment; substreams are
// derived by hashing (seed, purpose, step, layer) through the same finalizer,
// so any (step, layer, purpose) triple maps to an independent stream and
// identical seeds reproduce identical draws bitwise on every platform.

#include <cmath>
#include <cstdint>

namespace rcp {

enum class StreamPurpose : std::uint64_t {
    param_init = 1,
    data = 2,
    logistic_noise = 3,
    query_dropout = 4,
    eval_data = 5,
    misc = 6,
};

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Independent stream for (purpose, step, layer); does not disturb *this.
    Rng substream(StreamPurpose purpose, std::uint64_t step = 0, std::uint64_t layer = 0) const {
        std::uint64_t s = state_;
        s = mix(s ^ static_cast<std::uint64_t>(purpose));
        s = mix(s ^ (step * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL));
        s = mix(s ^ (layer * 0xd1b54a32d192ed03ULL + 0x2545f4914f6cdd1dULL));
        return Rng(s);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform on [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; consumes two uniforms per pair, caches the second draw.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Sample of the standard logistic distribution: log(u) - log(1-u) with
    // u clamped to [1e-7, 1-1e-7] to keep the transform finite.
    double logistic() {
        double u = uniform();
        if (u < 1e-7) u = 1e-7;
        if (u > 1.0 - 1e-7) u = 1.0 - 1e-7;
        return std::log(u) - std::log(1.0 - u);
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace rcp

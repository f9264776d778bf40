#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace vdpm {

/// Mixes an arbitrary number of 64-bit values into one seed (splitmix64).
inline uint64_t hash_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

template <typename... Rest>
inline uint64_t hash_seed(uint64_t x, uint64_t y, Rest... rest) {
    return hash_seed(hash_seed(x) ^ (y + 0x9e3779b97f4a7c15ULL), rest...);
}

/// Deterministic random source. Distributions are hand-rolled on top of the
/// raw engine output so that streams are identical across standard library
/// implementations, which the fixed-seed reproducibility guarantees rely on.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (no cached spare, keeps the stream
    /// position a pure function of the call count).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 eng_;
};

} // namespace vdpm

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace gaitlab {

// Deterministic counter-free PRNG (splitmix64 core). Results are identical
// across platforms and compilers, which keeps generated datasets, batch
// sampling and weight init reproducible from a single integer seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(mix64(seed ^ 0xd1b54a32d192ed03ULL)) {}

    // Independent child stream keyed by `tag`; forking does not advance this stream.
    Rng fork(std::uint64_t tag) const { return Rng(state_ ^ mix64(tag ^ 0x8cb92ba72f3d8dd7ULL)); }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be >= 1.
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    double gaussian() {
        // Box-Muller; u clamped away from 0 so log stays finite.
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586476925286766559 * v);
    }

    double gaussian(double mean, double sigma) { return mean + sigma * gaussian(); }

    // First k entries of a Fisher-Yates shuffle of 0..n-1.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = 0; i < k && i < n - 1; ++i) {
            int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k < n ? k : n);
        return idx;
    }

  private:
    std::uint64_t state_;
};

}  // namespace gaitlab

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace muninn {

// Counter-based random numbers. Every draw is a pure function of
// (seed, stream, index, lane), so tapes regenerate bit-identically and
// parallel episode loops never share generator state.

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x;
}

inline std::uint64_t rng_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t index, std::uint64_t lane) {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ stream);
    h = mix64(h ^ index);
    h = mix64(h ^ lane);
    return h;
}

// Uniform in [0, 1) from the top 53 bits.
inline double rng_u01(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Standard normal via Box-Muller on two decorrelated counters.
inline double rng_gauss(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    const std::uint64_t h1 = rng_key(seed, stream, index, 0);
    const std::uint64_t h2 = rng_key(seed, stream, index, 1);
    const double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = rng_u01(h2);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Deterministic sub-seed derivation for named roles (calibration tapes,
// evaluation tapes, contexts, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t role_tag, std::uint64_t index) {
    return rng_key(root, role_tag, index, 0xD5EEDULL);
}

// Stateful convenience wrapper over the counter generator; used where a
// sequence is consumed locally (bootstrap resampling, shuffles).
class CounterRng {
   public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    double u01() { return rng_u01(rng_key(seed_, stream_, n_++, 2)); }
    double gauss() { return rng_gauss(seed_, stream_, n_++); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return rng_key(seed_, stream_, n_++, 3) % n; }

   private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t n_ = 0;
};

// Deterministic Fisher-Yates permutation of {0, .., n-1}. std::shuffle is not
// pinned across standard libraries, so splits use this instead.
inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    CounterRng rng(seed, 0x5C0FFEEULL);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace muninn

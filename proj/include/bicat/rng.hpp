#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace bicat {

// All randomness in the toolkit flows through one master seed.  Per-stage
// streams are derived as stage_seed(master, name), where the stage name is
// mixed in via FNV-1a and the result whitened with one SplitMix64 round.
// The rule is fixed so that reruns of any stage reproduce byte-identical
// artifacts.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) {
    return splitmix64(master ^ fnv1a64(stage));
}

using Rng = std::mt19937_64;

// Unbiased integer in [0, n).  Implemented by rejection on the top bits so the
// draw sequence does not depend on the standard library's distribution
// internals.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t v = rng();
    while (v > limit) v = rng();
    return v % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform double in [lo, hi).
inline double uniform_real(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

template <class T>
void shuffle_inplace(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace bicat

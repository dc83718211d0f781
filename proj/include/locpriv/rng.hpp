#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "locpriv/errors.hpp"

namespace locpriv {

// splitmix64: small counter-based mixing function used to derive independent
// substream seeds from a master seed.  Every stochastic stage of the pipeline
// derives its own engine as derive_seed(master, stage_tag, index...), so the
// sampling order of one stage can never perturb another.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a) {
    return splitmix64(master ^ splitmix64(a));
}
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(master, a), b);
}
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
    return derive_seed(derive_seed(master, a, b), c);
}

// Deterministic RNG wrapper.  We avoid std::uniform_real_distribution /
// std::discrete_distribution because the standard does not pin their
// algorithms; the helpers below are implementation-independent so results
// are byte-identical across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [0, n).  n must be positive.
    std::size_t index(std::size_t n) {
        if (n == 0) throw EmptyResult("Rng::index: empty range");
        // Multiplicative range reduction; bias is < 2^-53 per draw, far below
        // anything observable in our sample sizes, and it is deterministic.
        return static_cast<std::size_t>(u01() * static_cast<double>(n)) % n;
    }

    // Sample an index from unnormalized non-negative weights.
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw EmptyResult("Rng::categorical: weights sum to zero");
        double r = u01() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (r < acc) return i;
        }
        return weights.size() - 1;  // guard against accumulated rounding
    }

    // Standard normal via Box-Muller (deterministic, no cached spare).
    double normal() {
        double u1 = u01();
        double u2 = u01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

// Fisher-Yates shuffle driven by Rng::index so the permutation is
// reproducible across platforms.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.index(i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace locpriv

#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace cstn {

// SplitMix64 step. Used both as the core generator and to derive child
// stream seeds, so every consumer is reproducible from a single root seed
// regardless of how many samples other consumers drew.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Small deterministic RNG. Distribution code is hand-rolled on top of the
/// raw 64-bit stream so results do not depend on the standard library's
/// unspecified <random> distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // Warm up so that small seeds do not produce correlated lead values.
        splitmix64(state_);
        splitmix64(state_);
    }

    /// Independent child stream; identical (parent_seed, salts...) always
    /// yields the same child. Counter-based: no draws from the parent.
    static Rng child(std::uint64_t seed, std::uint64_t salt_a, std::uint64_t salt_b = 0) {
        std::uint64_t s = seed;
        splitmix64(s);
        s ^= 0xD1B54A32D192ED03ULL * (salt_a + 1);
        splitmix64(s);
        s ^= 0x2545F4914F6CDD1DULL * (salt_b + 1);
        splitmix64(s);
        return Rng(s);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Modulo bias is < 2^-50 for every n used here (n << 2^64).
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

} // namespace cstn

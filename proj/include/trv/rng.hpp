#pragma once

#include <cmath>
#include <cstdint>

namespace trv {

// splitmix64; used both as a seed mixer and as the counter-based generator
// behind synthetic data, so values are identical on every platform.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

// Map 64 random bits to a double in [0, 1). 53-bit mantissa, exact on all
// IEEE-754 targets.
inline double bits_to_unit(uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Deterministic RNG. Does not use std:: distributions, whose output is
// implementation-defined; every draw here is pinned bit-for-bit.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}

    uint64_t next_u64() {
        state_ = splitmix64(state_ ^ counter_++);
        return state_;
    }

    // uniform in [0, 1)
    double uniform() { return bits_to_unit(next_u64()); }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // normal resampled until |z| <= 2, as used by BEiT-style init
    double truncated_normal(double mean, double std) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return mean + std * z;
    }

private:
    uint64_t state_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace trv

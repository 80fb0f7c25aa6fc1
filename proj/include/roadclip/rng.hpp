#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "roadclip/errors.hpp"

namespace roadclip {

/// Deterministic pseudo-randomness with named streams.
///
/// Every consumer derives its own stream from (root seed, stream name), so
/// adding a new consumer never shifts the draws seen by existing ones.  All
/// distribution mapping is done here rather than with std:: distributions,
/// whose output is not pinned across standard library implementations.

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Combine a root seed and a stream name into a child seed.
inline uint64_t derive_seed(uint64_t root, std::string_view name) {
    return splitmix64(root ^ fnv1a64(name));
}

/// splitmix64 generator.  seed() is the fixed identity used to derive child
/// streams; the draw counter evolves independently of it.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}
    Rng(uint64_t root, std::string_view stream) : Rng(derive_seed(root, stream)) {}

    uint64_t seed() const { return seed_; }

    /// Child generator for a named sub-stream; does not consume from this one.
    Rng stream(std::string_view name) const { return Rng(derive_seed(seed_, name)); }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ValidationError("rng: uniform_int needs a positive bound");
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    /// Standard normal via Box-Muller; one draw per call, pair cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal clipped by resampling to [-2, 2] stddevs, the usual embedding init.
    double trunc_normal(double stddev) {
        for (;;) {
            double v = normal();
            if (v >= -2.0 && v <= 2.0) return v * stddev;
        }
    }

    /// Fisher-Yates shuffle; order depends only on this stream's state.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_;
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace roadclip

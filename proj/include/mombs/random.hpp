#pragma once

// Seeded random streams. Every stochastic step in the library draws from an
// Rng built by derive_seed(), so results depend only on the root seed and the
// stream labels, never on call order across unrelated components.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <utility>

namespace mombs {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Folds any number of integer labels into a child seed of `root`.
template <class... Labels>
constexpr std::uint64_t derive_seed(std::uint64_t root, Labels... labels) noexcept {
    std::uint64_t s = mix64(root);
    ((s = mix64(s ^ static_cast<std::uint64_t>(labels))), ...);
    return s;
}

// Stream labels used by derive_seed.
namespace stream {
inline constexpr std::uint64_t model_init = 0x1001;
inline constexpr std::uint64_t data = 0x1002;
inline constexpr std::uint64_t split = 0x1003;
inline constexpr std::uint64_t plan = 0x1004;
inline constexpr std::uint64_t perturbation = 0x1005;
inline constexpr std::uint64_t probe = 0x1006;
inline constexpr std::uint64_t noise_labels = 0x1007;
inline constexpr std::uint64_t test_data = 0x1008;
}  // namespace stream

/// Thin wrapper over mt19937_64 with distribution code written out, so draws
/// are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() {
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Fisher-Yates.
    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mombs

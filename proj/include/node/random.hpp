#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace node::rng {

// SplitMix64 finalizer. Used both as a stateless hash and as the core of the
// counter-based streams below.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
    return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Sub-seed for a named pipeline stage: mix64(seed ^ fnv1a(stage)).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) noexcept {
    return mix64(seed ^ fnv1a(stage));
}

// Counter-based stream: the n-th draw depends only on (key, n), so results do
// not depend on the order in which independent streams are consumed.
class Stream {
public:
    constexpr Stream(std::uint64_t seed, std::uint64_t index) noexcept
        : key_(hash_combine(seed, index)) {}

    constexpr std::uint64_t next_u64() noexcept { return mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // Uniform in the open interval (0, 1).
    double uniform() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t x = next_u64();
            const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
            if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
        }
    }

    double normal() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Poisson variate. Inversion for small means, Hormann's PTRS transformed
    // rejection in the mid range and a rounded normal above 1000.
    std::int64_t poisson(double lambda) noexcept {
        if (!(lambda > 0.0)) return 0;
        if (lambda < 30.0) {
            double u = uniform();
            double p = std::exp(-lambda);
            double cdf = p;
            std::int64_t k = 0;
            while (u > cdf && k < 1000) {
                ++k;
                p *= lambda / static_cast<double>(k);
                cdf += p;
            }
            return k;
        }
        if (lambda > 1000.0) {
            const double k = std::round(lambda + std::sqrt(lambda) * normal());
            return k < 0.0 ? 0 : static_cast<std::int64_t>(k);
        }
        const double slam = std::sqrt(lambda);
        const double loglam = std::log(lambda);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2.0);
        for (;;) {
            const double u = uniform() - 0.5;
            const double v = uniform();
            const double us = 0.5 - std::fabs(u);
            const double k = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
            if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
            if (k < 0.0 || (us < 0.013 && v > us)) continue;
            if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b)
                <= -lambda + k * loglam - std::lgamma(k + 1.0)) {
                return static_cast<std::int64_t>(k);
            }
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace node::rng

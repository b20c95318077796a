#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace intseq {

// Portable 64-bit generator (splitmix64). Chosen over std::mt19937_64 so
// that seeded shuffles and mask patterns are identical on every platform.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0, bound). bound > 0.
    std::uint64_t bounded(std::uint64_t bound) {
        return next() % bound;
    }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    // Normal truncated to [-2s, 2s] by rejection.
    double truncated_normal(double s) {
        for (;;) {
            double x = normal() * s;
            if (std::fabs(x) <= 2.0 * s) return x;
        }
    }

private:
    std::uint64_t state_;
};

// FNV-1a, used to derive independent substreams from (seed, label) pairs.
inline std::uint64_t hash_label(std::string_view label) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline SplitMix64 derive_stream(std::uint64_t seed, std::string_view label) {
    SplitMix64 mix(seed ^ hash_label(label));
    mix.next();
    return mix;
}

// In-place Fisher-Yates shuffle driven by the portable generator.
template <typename T>
void fisher_yates_shuffle(std::vector<T>& items, SplitMix64& rng) {
    if (items.size() < 2) return;
    for (std::size_t i = 0; i + 1 < items.size(); ++i) {
        std::size_t j = i + static_cast<std::size_t>(
            rng.bounded(static_cast<std::uint64_t>(items.size() - i)));
        std::swap(items[i], items[j]);
    }
}

}  // namespace intseq

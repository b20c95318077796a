#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "intseq/bigint.hpp"
#include "intseq/rng.hpp"

namespace intseq {

inline constexpr std::uint32_t kMinModulus = 2;
inline constexpr std::uint32_t kMaxModulus = 101;
inline constexpr std::size_t kNumModuli = 100;
inline constexpr std::size_t kMaxSeqLen = 128;

// Moduli m = 2..101 in ascending order.
inline const std::vector<std::uint32_t>& default_moduli() {
    static const std::vector<std::uint32_t> moduli = [] {
        std::vector<std::uint32_t> v;
        for (std::uint32_t m = kMinModulus; m <= kMaxModulus; ++m) v.push_back(m);
        return v;
    }();
    return moduli;
}

enum class SignClass : int { Positive = 0, Negative = 1, Zero = 2 };

// Log-scale magnitude: 0 for x=0, else 1 + log10|x|. Values past 300 decimal
// digits fall back to the digit count, which stays within one unit of the
// exact log form and avoids double overflow.
inline double magnitude_value(const BigInt& x) {
    if (x == 0) return 0.0;
    std::size_t digits = digit_count(x);
    if (digits > 300) return static_cast<double>(digits);
    BigInt a = abs(x);
    return 1.0 + std::log10(a.get_d());
}

inline SignClass sign_class(const BigInt& x) {
    int s = sgn(x);
    if (s > 0) return SignClass::Positive;
    if (s < 0) return SignClass::Negative;
    return SignClass::Zero;
}

struct MagnitudeFeatures {
    double v = 0.0;
    std::array<double, 3> sign_onehot{};  // [x>0, x<0, x=0]
};

inline MagnitudeFeatures magnitude_features(const BigInt& x) {
    MagnitudeFeatures f;
    f.v = magnitude_value(x);
    f.sign_onehot[static_cast<int>(sign_class(x))] = 1.0;
    return f;
}

inline std::uint32_t residue(const BigInt& x, std::uint32_t m) {
    if (m < kMinModulus || m > kMaxModulus) {
        throw std::invalid_argument("modulus out of range [2, 101]");
    }
    return mod_residue(x, m);
}

// Unit-circle residue embedding: (sin, cos) of 2*pi*r/m per modulus,
// m ascending, sin before cos.
inline std::vector<double> modulo_features(
    const BigInt& x, const std::vector<std::uint32_t>& moduli = default_moduli()) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    std::vector<double> f;
    f.reserve(2 * moduli.size());
    for (std::uint32_t m : moduli) {
        double angle = two_pi * static_cast<double>(mod_residue(x, m)) /
                       static_cast<double>(m);
        f.push_back(std::sin(angle));
        f.push_back(std::cos(angle));
    }
    return f;
}

struct PositionTargets {
    double v = 0.0;
    SignClass sign = SignClass::Zero;
    std::vector<std::uint32_t> residues;  // residues[j] in [0, moduli[j])
};

struct MaskedSample {
    std::size_t length = 0;
    std::vector<MagnitudeFeatures> mag_features;   // per position
    std::vector<std::vector<double>> mod_features; // per position
    std::vector<bool> mask_flags;
    std::vector<PositionTargets> targets;
    // Token view for the vanilla baseline; filled lazily by the model.
    std::vector<BigInt> values;
};

// Features and targets for every position, no masking applied.
inline MaskedSample featurize(
    const std::vector<BigInt>& terms,
    const std::vector<std::uint32_t>& moduli = default_moduli()) {
    if (terms.empty() || terms.size() > kMaxSeqLen) {
        throw std::invalid_argument("sequence length must be in [1, 128]");
    }
    MaskedSample s;
    s.length = terms.size();
    s.values = terms;
    s.mask_flags.assign(terms.size(), false);
    for (const auto& x : terms) {
        s.mag_features.push_back(magnitude_features(x));
        s.mod_features.push_back(modulo_features(x, moduli));
        PositionTargets t;
        t.v = magnitude_value(x);
        t.sign = sign_class(x);
        t.residues.reserve(moduli.size());
        for (std::uint32_t m : moduli) t.residues.push_back(mod_residue(x, m));
        s.targets.push_back(std::move(t));
    }
    return s;
}

// Independent Bernoulli(p) masking; if nothing gets masked, one uniformly
// random position is forced so every sample contributes loss.
inline MaskedSample mask_sample(
    const std::vector<BigInt>& terms, double p, SplitMix64& rng,
    const std::vector<std::uint32_t>& moduli = default_moduli()) {
    MaskedSample s = featurize(terms, moduli);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < s.length; ++i) {
        if (rng.uniform() < p) {
            s.mask_flags[i] = true;
            ++masked;
        }
    }
    if (masked == 0) {
        s.mask_flags[rng.bounded(s.length)] = true;
    }
    return s;
}

}  // namespace intseq

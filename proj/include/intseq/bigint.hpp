#pragma once

#include <gmpxx.h>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace intseq {

using BigInt = mpz_class;

inline BigInt parse_bigint(const std::string& text) {
    BigInt value;
    if (value.set_str(text, 10) != 0) {
        throw std::invalid_argument("not a decimal integer: '" + text + "'");
    }
    return value;
}

inline std::string to_string(const BigInt& value) {
    return value.get_str(10);
}

// Number of decimal digits of |x|; 1 for x = 0.
inline std::size_t digit_count(const BigInt& x) {
    if (x == 0) return 1;
    BigInt a = abs(x);
    return a.get_str(10).size();
}

// Mathematical (nonnegative) residue: result in [0, m) for m > 0.
inline std::uint32_t mod_residue(const BigInt& x, std::uint32_t m) {
    BigInt r;
    mpz_fdiv_r_ui(r.get_mpz_t(), x.get_mpz_t(), m);
    return static_cast<std::uint32_t>(r.get_ui());
}

inline BigInt pow10_int(unsigned long exponent) {
    BigInt r;
    mpz_ui_pow_ui(r.get_mpz_t(), 10, exponent);
    return r;
}

}  // namespace intseq

#include <catch_amalgamated.hpp>

#include <numeric>

#include "intseq/featurizer.hpp"

using namespace intseq;

namespace {

// Independent residue oracle: fold the decimal string digit by digit,
// never touching the bigint mod path under test.
std::uint32_t string_mod(const std::string& decimal, std::uint32_t m) {
    bool negative = decimal[0] == '-';
    std::uint64_t r = 0;
    for (std::size_t i = negative ? 1 : 0; i < decimal.size(); ++i) {
        r = (r * 10 + static_cast<std::uint64_t>(decimal[i] - '0')) % m;
    }
    if (negative && r != 0) r = m - r;
    return static_cast<std::uint32_t>(r);
}

BigInt random_bigint(SplitMix64& rng, std::size_t max_digits) {
    std::size_t digits = 1 + rng.bounded(max_digits);
    std::string s;
    s += static_cast<char>('1' + rng.bounded(9));
    for (std::size_t i = 1; i < digits; ++i) {
        s += static_cast<char>('0' + rng.bounded(10));
    }
    BigInt x = parse_bigint(s);
    return rng.bounded(2) ? BigInt(-x) : x;
}

}  // namespace

TEST_CASE("magnitude_value matches the log-scale definition") {
    CHECK(magnitude_value(BigInt(0)) == 0.0);
    CHECK(magnitude_value(BigInt(100)) == Catch::Approx(3.0));
    CHECK(magnitude_value(BigInt(1)) == Catch::Approx(1.0));
    CHECK(magnitude_value(BigInt(-5)) == Catch::Approx(1.0 + std::log10(5.0)));
}

TEST_CASE("magnitude_value falls back to digit count past 300 digits") {
    BigInt x = pow10_int(399);  // 400 digits
    CHECK(magnitude_value(x) == 400.0);
    CHECK(magnitude_value(BigInt(-x)) == 400.0);
    // 300 digits still uses the exact form.
    BigInt y = pow10_int(299);
    CHECK(magnitude_value(y) == Catch::Approx(300.0));
}

TEST_CASE("magnitude round-trip within 1e-10 for |x| <= 1e15") {
    SplitMix64 rng(7);
    for (int i = 0; i < 500; ++i) {
        BigInt x = random_bigint(rng, 15);
        double v = magnitude_value(x);
        double recovered = std::pow(10.0, v - 1.0);
        double truth = std::fabs(x.get_d());
        CHECK(std::fabs(recovered - truth) / truth < 1e-10);
    }
}

TEST_CASE("magnitude_value is nondecreasing in |x| across the fallback") {
    std::vector<BigInt> xs;
    for (int d = 295; d <= 305; ++d) {
        xs.push_back(pow10_int(d) - 1);  // d digits, all nines
        xs.push_back(pow10_int(d));      // d+1 digits
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 1; i < xs.size(); ++i) {
        CHECK(magnitude_value(xs[i]) >= magnitude_value(xs[i - 1]));
    }
}

TEST_CASE("magnitude_features one-hot sign") {
    auto f = magnitude_features(BigInt(-5));
    CHECK(f.v == Catch::Approx(1.0 + std::log10(5.0)));
    CHECK(f.sign_onehot == std::array<double, 3>{0, 1, 0});
    CHECK(magnitude_features(BigInt(0)).sign_onehot ==
          std::array<double, 3>{0, 0, 1});
    CHECK(magnitude_features(BigInt(1)).sign_onehot ==
          std::array<double, 3>{1, 0, 0});
    CHECK(magnitude_features(BigInt(1)).v == Catch::Approx(1.0));
}

TEST_CASE("residue uses the nonnegative convention") {
    CHECK(residue(BigInt(-7), 3) == 2);
    CHECK(residue(BigInt(7), 3) == 1);
    CHECK(residue(BigInt(0), 97) == 0);
    CHECK_THROWS_AS(residue(BigInt(1), 1), std::invalid_argument);
    CHECK_THROWS_AS(residue(BigInt(1), 102), std::invalid_argument);
}

TEST_CASE("residue agrees with the string-fold oracle on big integers") {
    BigInt big = pow10_int(100);
    CHECK(residue(big, 97) == string_mod(to_string(big), 97));
    SplitMix64 rng(99);
    for (int i = 0; i < 300; ++i) {
        BigInt x = random_bigint(rng, 80);
        std::string s = to_string(x);
        for (std::uint32_t m : {2u, 3u, 7u, 10u, 59u, 96u, 101u}) {
            REQUIRE(residue(x, m) == string_mod(s, m));
        }
    }
}

TEST_CASE("modulo_features layout and base cases") {
    auto f0 = modulo_features(BigInt(0));
    REQUIRE(f0.size() == 200);
    for (std::size_t j = 0; j < 100; ++j) {
        CHECK(f0[2 * j] == Catch::Approx(0.0).margin(1e-15));
        CHECK(f0[2 * j + 1] == Catch::Approx(1.0));
    }
    // x=7, m=3 is the second modulus slot; r = 1.
    auto f7 = modulo_features(BigInt(7));
    constexpr double two_pi = 6.283185307179586476925286766559;
    CHECK(f7[2] == Catch::Approx(std::sin(two_pi / 3.0)));
    CHECK(f7[3] == Catch::Approx(std::cos(two_pi / 3.0)));
}

TEST_CASE("modulo feature pairs stay on the unit circle") {
    SplitMix64 rng(5);
    for (int i = 0; i < 200; ++i) {
        auto f = modulo_features(random_bigint(rng, 60));
        for (std::size_t j = 0; j < 100; ++j) {
            double norm = f[2 * j] * f[2 * j] + f[2 * j + 1] * f[2 * j + 1];
            REQUIRE(std::fabs(norm - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("modulo features are periodic in lcm(2..101)") {
    BigInt lcm = 1;
    for (std::uint32_t m : default_moduli()) {
        BigInt g = gcd(lcm, BigInt(m));
        lcm = lcm / g * m;
    }
    SplitMix64 rng(11);
    for (int i = 0; i < 50; ++i) {
        BigInt x = random_bigint(rng, 30);
        long k = static_cast<long>(rng.bounded(7)) - 3;
        auto fa = modulo_features(x);
        auto fb = modulo_features(x + lcm * k);
        for (std::size_t j = 0; j < fa.size(); ++j) {
            REQUIRE(fa[j] == Catch::Approx(fb[j]).margin(1e-12));
        }
    }
}

TEST_CASE("residues are CRT-consistent across composite/prime pairs") {
    const std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs = {
        {6, 2},  {6, 3},  {10, 2}, {10, 5}, {15, 3},
        {15, 5}, {14, 7}, {21, 3}, {33, 11}, {95, 19}};
    SplitMix64 rng(21);
    for (int i = 0; i < 300; ++i) {
        BigInt x = random_bigint(rng, 50);
        for (auto [composite, prime] : pairs) {
            REQUIRE(residue(x, composite) % prime == residue(x, prime));
        }
    }
}

TEST_CASE("featurize fills targets at every position") {
    std::vector<BigInt> terms = {0, 1, -2, 3, 100};
    auto s = featurize(terms);
    REQUIRE(s.length == 5);
    CHECK(s.targets[0].sign == SignClass::Zero);
    CHECK(s.targets[2].sign == SignClass::Negative);
    CHECK(s.targets[4].v == Catch::Approx(3.0));
    for (const auto& t : s.targets) {
        REQUIRE(t.residues.size() == 100);
        for (std::size_t j = 0; j < 100; ++j) {
            REQUIRE(t.residues[j] < default_moduli()[j]);
        }
    }
    CHECK(s.targets[2].residues[0] == 0);  // -2 mod 2
    CHECK(s.targets[2].residues[1] == 1);  // -2 mod 3
}

TEST_CASE("mask_sample forced-mask and saturation rules") {
    std::vector<BigInt> terms(10, BigInt(1));

    SplitMix64 rng1(1);
    auto none = mask_sample(terms, 0.0, rng1);
    CHECK(std::count(none.mask_flags.begin(), none.mask_flags.end(), true) == 1);

    SplitMix64 rng2(2);
    auto all = mask_sample(terms, 1.0, rng2);
    CHECK(std::count(all.mask_flags.begin(), all.mask_flags.end(), true) == 10);
}

TEST_CASE("mask_sample is deterministic under a fixed seed") {
    std::vector<BigInt> terms(64, BigInt(3));
    SplitMix64 a(1234), b(1234);
    auto sa = mask_sample(terms, 0.15, a);
    auto sb = mask_sample(terms, 0.15, b);
    CHECK(sa.mask_flags == sb.mask_flags);
}

TEST_CASE("featurize rejects out-of-contract lengths") {
    CHECK_THROWS_AS(featurize({}), std::invalid_argument);
    std::vector<BigInt> too_long(129, BigInt(1));
    CHECK_THROWS_AS(featurize(too_long), std::invalid_argument);
}

#pragma once

#include <mpfr.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "intseq/bigint.hpp"
#include "intseq/featurizer.hpp"

namespace intseq {

class ResourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class SolverMode { Zero, Dense, Sieve, CRT, None };

inline const char* solver_mode_name(SolverMode m) {
    switch (m) {
        case SolverMode::Zero: return "zero";
        case SolverMode::Dense: return "dense";
        case SolverMode::Sieve: return "sieve";
        case SolverMode::CRT: return "crt";
        case SolverMode::None: return "none";
    }
    return "?";
}

struct SolverQuery {
    double mu = 0.0;
    double log_var = 0.0;
    std::array<double, 3> sign_probs{};            // [+, -, 0]
    std::vector<std::vector<double>> residue_probs;  // per modulus, size m
    int k = 1;
    int beam_width = 64;
    double anchor_threshold = 0.9;
    double anchor_fallback = 0.5;
    int residues_per_anchor = 2;
    std::size_t candidate_cap = 1000000;
    std::vector<std::uint32_t> moduli = default_moduli();
};

struct SearchInterval {
    BigInt n_min;
    BigInt n_max;
    bool empty() const { return n_max < n_min; }
    BigInt width() const { return n_max - n_min; }
};

struct SolverResult {
    SolverMode mode = SolverMode::None;
    std::vector<std::pair<BigInt, double>> candidates;  // sorted best first
};

namespace detail {

// floor/ceil of 10^e as exact integers; e is a double exponent. Uses MPFR at
// a precision covering every integer digit of the result.
inline BigInt pow10_floor_d(double e) {
    if (e < 0) return BigInt(0);
    mpfr_prec_t prec = static_cast<mpfr_prec_t>(e * 3.33) + 96;
    mpfr_t t;
    mpfr_init2(t, prec);
    mpfr_set_d(t, e, MPFR_RNDN);
    mpfr_exp10(t, t, MPFR_RNDN);
    BigInt r;
    mpfr_get_z(r.get_mpz_t(), t, MPFR_RNDD);
    mpfr_clear(t);
    return r;
}

inline BigInt pow10_ceil_d(double e) {
    if (e < 0) return BigInt(1);
    mpfr_prec_t prec = static_cast<mpfr_prec_t>(e * 3.33) + 96;
    mpfr_t t;
    mpfr_init2(t, prec);
    mpfr_set_d(t, e, MPFR_RNDN);
    mpfr_exp10(t, t, MPFR_RNDN);
    BigInt r;
    mpfr_get_z(r.get_mpz_t(), t, MPFR_RNDU);
    mpfr_clear(t);
    return r;
}

// Candidate ordering: higher score first, then smaller |value|, then
// positive before negative.
inline bool candidate_better(const std::pair<BigInt, double>& a,
                             const std::pair<BigInt, double>& b) {
    if (a.second != b.second) return a.second > b.second;
    BigInt aa = abs(a.first), ab = abs(b.first);
    if (aa != ab) return aa < ab;
    return a.first > b.first;
}

// Keeps the k best candidates seen.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) {}

    void push(const BigInt& value, double score) {
        std::pair<BigInt, double> c{value, score};
        if (heap_.size() < k_) {
            heap_.push_back(std::move(c));
            std::push_heap(heap_.begin(), heap_.end(), worse_on_top);
            return;
        }
        if (candidate_better(c, heap_.front())) {
            std::pop_heap(heap_.begin(), heap_.end(), worse_on_top);
            heap_.back() = std::move(c);
            std::push_heap(heap_.begin(), heap_.end(), worse_on_top);
        }
    }

    std::vector<std::pair<BigInt, double>> sorted() {
        std::vector<std::pair<BigInt, double>> out = heap_;
        std::sort(out.begin(), out.end(), candidate_better);
        return out;
    }

private:
    // std::make_heap keeps the "largest" on top; we want the worst on top so
    // it can be evicted.
    static bool worse_on_top(const std::pair<BigInt, double>& a,
                             const std::pair<BigInt, double>& b) {
        return candidate_better(a, b);
    }
    std::size_t k_;
    std::vector<std::pair<BigInt, double>> heap_;
};

inline std::int64_t egcd(std::int64_t a, std::int64_t b, std::int64_t& x,
                         std::int64_t& y) {
    if (b == 0) {
        x = 1;
        y = 0;
        return a;
    }
    std::int64_t x1, y1;
    std::int64_t g = egcd(b, a % b, x1, y1);
    x = y1;
    y = x1 - (a / b) * y1;
    return g;
}

inline std::int64_t mod_inverse(std::int64_t a, std::int64_t m) {
    std::int64_t x, y;
    std::int64_t g = egcd(((a % m) + m) % m, m, x, y);
    if (g != 1) throw std::logic_error("mod_inverse of non-coprime pair");
    return ((x % m) + m) % m;
}

}  // namespace detail

// 3-sigma search interval in integer space: v-space bounds [mu-3s, mu+3s]
// clamped below at v=1 map to [ceil(10^(lo-1)), floor(10^(hi-1))].
inline SearchInterval sigma_interval(double mu, double log_var) {
    if (!std::isfinite(mu) || !std::isfinite(log_var)) {
        throw std::invalid_argument("non-finite magnitude prediction");
    }
    double sigma = std::exp(0.5 * log_var);
    double lo = std::max(1.0, mu - 3.0 * sigma);
    double hi = mu + 3.0 * sigma;
    if (hi - 1.0 > 1e6) {
        throw ResourceError("search bound exceeds 10^6 digits");
    }
    SearchInterval iv;
    iv.n_min = detail::pow10_ceil_d(lo - 1.0);
    if (iv.n_min < 1) iv.n_min = 1;
    iv.n_max = detail::pow10_floor_d(hi - 1.0);
    return iv;
}

inline SolverMode select_mode(const BigInt& delta_n) {
    static const BigInt dense_max = pow10_int(6);
    static const BigInt sieve_max = pow10_int(14);
    if (delta_n <= dense_max) return SolverMode::Dense;
    if (delta_n <= sieve_max) return SolverMode::Sieve;
    return SolverMode::CRT;
}

inline constexpr double kSigmaFloor = 1e-4;   // variance floor
inline constexpr double kProbFloor = 1e-12;   // residue probability floor
inline constexpr double kModScoreWeight = 0.3;

// score(n) = -(v(n)-mu)^2 / (2 sigma^2) + 0.3 * sum_m ln P_m(n mod m).
// Residues are evaluated on the signed candidate.
inline double score_candidate(const BigInt& n, const SolverQuery& q) {
    if (n == 0) throw std::invalid_argument("score_candidate requires n != 0");
    double v = magnitude_value(n);
    double sigma2 = std::max(std::exp(q.log_var), kSigmaFloor);
    double score = -(v - q.mu) * (v - q.mu) / (2.0 * sigma2);
    double mod_sum = 0.0;
    for (std::size_t j = 0; j < q.moduli.size(); ++j) {
        std::uint32_t r = mod_residue(n, q.moduli[j]);
        mod_sum += std::log(std::max(q.residue_probs[j][r], kProbFloor));
    }
    return score + kModScoreWeight * mod_sum;
}

namespace detail {

inline int predicted_sign(const SolverQuery& q) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
        if (q.sign_probs[i] > q.sign_probs[best]) best = i;
    }
    return best;  // 0 = +, 1 = -, 2 = zero
}

// Scores the signed candidate with residue arithmetic done on small ints
// where the caller already tracks them.
inline double score_with_residues(const BigInt& value, double v,
                                  const std::vector<std::uint32_t>& residues,
                                  const SolverQuery& q) {
    (void)value;
    double sigma2 = std::max(std::exp(q.log_var), kSigmaFloor);
    double score = -(v - q.mu) * (v - q.mu) / (2.0 * sigma2);
    double mod_sum = 0.0;
    for (std::size_t j = 0; j < q.moduli.size(); ++j) {
        mod_sum += std::log(std::max(q.residue_probs[j][residues[j]], kProbFloor));
    }
    return score + kModScoreWeight * mod_sum;
}

struct AnchorChoice {
    std::size_t index;  // into q.moduli
    std::uint32_t m;
    std::vector<std::pair<std::uint32_t, double>> residues;  // top alternatives
};

// Greedy coprime anchor selection by descending max residue probability.
inline std::vector<AnchorChoice> select_anchors(const SolverQuery& q,
                                                const BigInt& target_product,
                                                double threshold,
                                                BigInt& product_out) {
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t j = 0; j < q.moduli.size(); ++j) {
        double mx = *std::max_element(q.residue_probs[j].begin(),
                                      q.residue_probs[j].end());
        order.push_back({mx, j});
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) {
                         if (a.first != b.first) return a.first > b.first;
                         return a.second < b.second;  // smaller modulus first
                     });
    std::vector<AnchorChoice> anchors;
    BigInt product = 1;
    for (const auto& [mx, j] : order) {
        if (product >= target_product) break;
        if (mx < threshold) continue;
        std::uint32_t m = q.moduli[j];
        bool coprime = true;
        for (const auto& a : anchors) {
            if (std::gcd(a.m, m) != 1) {
                coprime = false;
                break;
            }
        }
        if (!coprime) continue;
        AnchorChoice c;
        c.index = j;
        c.m = m;
        std::vector<std::pair<std::uint32_t, double>> opts;
        for (std::uint32_t r = 0; r < m; ++r) {
            opts.push_back({r, q.residue_probs[j][r]});
        }
        std::stable_sort(opts.begin(), opts.end(),
                         [](const auto& a, const auto& b) {
                             return a.second > b.second;
                         });
        opts.resize(std::min<std::size_t>(
            opts.size(), static_cast<std::size_t>(q.residues_per_anchor)));
        c.residues = std::move(opts);
        anchors.push_back(std::move(c));
        product *= m;
    }
    product_out = product;
    return anchors;
}

// Anchor residues are residues of the signed value; the beam enumerates
// magnitudes. For a negative prediction the magnitude n = -x satisfies
// n = (m - r) mod m, so reflect each anchor residue before the CRT.
inline void reflect_anchors_for_sign(std::vector<AnchorChoice>& anchors,
                                     int sign) {
    if (sign != 1) return;
    for (auto& a : anchors) {
        for (auto& [r, p] : a.residues) r = (a.m - r) % a.m;
    }
}

struct BeamState {
    BigInt x0;  // residue modulo the running product
    double logp = 0.0;
};

// Beam over residue combinations; each anchor contributes its top
// alternatives and states combine incrementally via CRT.
inline std::vector<BeamState> beam_states(
    const std::vector<AnchorChoice>& anchors, int beam_width) {
    std::vector<BeamState> states{BeamState{BigInt(0), 0.0}};
    BigInt product = 1;
    for (const auto& anchor : anchors) {
        std::int64_t m = anchor.m;
        std::int64_t pm = mpz_fdiv_ui(product.get_mpz_t(),
                                      static_cast<unsigned long>(m));
        std::int64_t inv = mod_inverse(pm, m);
        std::vector<BeamState> next;
        next.reserve(states.size() * anchor.residues.size());
        for (const auto& st : states) {
            std::int64_t x0m = mpz_fdiv_ui(st.x0.get_mpz_t(),
                                           static_cast<unsigned long>(m));
            for (const auto& [r, p] : anchor.residues) {
                std::int64_t t =
                    ((static_cast<std::int64_t>(r) - x0m) % m + m) % m;
                t = (t * inv) % m;
                BeamState ns;
                ns.x0 = st.x0 + product * t;
                ns.logp = st.logp + std::log(std::max(p, kProbFloor));
                next.push_back(std::move(ns));
            }
        }
        std::stable_sort(next.begin(), next.end(),
                         [](const BeamState& a, const BeamState& b) {
                             return a.logp > b.logp;
                         });
        if (next.size() > static_cast<std::size_t>(beam_width)) {
            next.resize(beam_width);
        }
        states = std::move(next);
        product *= m;
    }
    return states;
}

inline void score_and_push(const BigInt& magnitude, int sign, TopK& top,
                           const SolverQuery& q, std::set<BigInt>& seen) {
    BigInt value = sign == 1 ? BigInt(-magnitude) : magnitude;
    if (!seen.insert(value).second) return;
    top.push(value, score_candidate(value, q));
}

}  // namespace detail

// Dense mode: score every integer in the interval.
inline SolverResult dense_solve(const SolverQuery& q,
                                const SearchInterval& interval) {
    SolverResult res;
    res.mode = SolverMode::Dense;
    if (interval.empty()) {
        res.mode = SolverMode::None;
        return res;
    }
    int sign = detail::predicted_sign(q);
    double sigma2 = std::max(std::exp(q.log_var), kSigmaFloor);

    // Incremental residues across the interval.
    std::vector<std::uint32_t> r(q.moduli.size());
    for (std::size_t j = 0; j < q.moduli.size(); ++j) {
        r[j] = mod_residue(interval.n_min, q.moduli[j]);
    }
    // Precomputed log-probabilities with the sign folded in:
    // for negative candidates P is looked up at (-n) mod m = (m - r) mod m.
    std::vector<std::vector<double>> logp(q.moduli.size());
    for (std::size_t j = 0; j < q.moduli.size(); ++j) {
        std::uint32_t m = q.moduli[j];
        logp[j].resize(m);
        for (std::uint32_t rr = 0; rr < m; ++rr) {
            std::uint32_t idx = sign == 1 ? (m - rr) % m : rr;
            logp[j][rr] = std::log(std::max(q.residue_probs[j][idx], kProbFloor));
        }
    }

    detail::TopK top(static_cast<std::size_t>(q.k));
    BigInt n = interval.n_min;
    while (n <= interval.n_max) {
        double v = magnitude_value(n);
        double score = -(v - q.mu) * (v - q.mu) / (2.0 * sigma2);
        double mod_sum = 0.0;
        for (std::size_t j = 0; j < q.moduli.size(); ++j) {
            mod_sum += logp[j][r[j]];
        }
        score += kModScoreWeight * mod_sum;
        top.push(sign == 1 ? BigInt(-n) : n, score);
        n += 1;
        for (std::size_t j = 0; j < q.moduli.size(); ++j) {
            if (++r[j] == q.moduli[j]) r[j] = 0;
        }
    }
    res.candidates = top.sorted();
    if (res.candidates.empty()) res.mode = SolverMode::None;
    return res;
}

// Sieve mode: coprime anchors with high-confidence residues seed a CRT beam;
// each beam state enumerates its residue class inside the interval.
inline SolverResult sieve_solve(const SolverQuery& q,
                                const SearchInterval& interval,
                                int beam_width) {
    SolverResult res;
    res.mode = SolverMode::Sieve;
    if (interval.empty()) {
        res.mode = SolverMode::None;
        return res;
    }
    BigInt delta = interval.width();
    BigInt product;
    auto anchors =
        detail::select_anchors(q, delta, q.anchor_threshold, product);
    if (anchors.empty()) {
        anchors = detail::select_anchors(q, delta, q.anchor_fallback, product);
    }
    if (anchors.empty()) {
        res.mode = SolverMode::None;
        return res;
    }
    int sign = detail::predicted_sign(q);
    detail::reflect_anchors_for_sign(anchors, sign);
    auto states = detail::beam_states(anchors, beam_width);

    detail::TopK top(static_cast<std::size_t>(q.k));
    std::set<BigInt> seen;
    // Nearest-to-mu enumeration centre in magnitude space.
    BigInt centre = detail::pow10_floor_d(std::max(q.mu - 1.0, 0.0));
    std::size_t budget = q.candidate_cap / std::max<std::size_t>(states.size(), 1);
    budget = std::max<std::size_t>(budget, 1);

    std::size_t total = 0;
    for (const auto& st : states) {
        // Lattice t range intersecting [n_min, n_max].
        BigInt t_lo, t_hi, tmp;
        tmp = interval.n_min - st.x0;
        mpz_cdiv_q(t_lo.get_mpz_t(), tmp.get_mpz_t(), product.get_mpz_t());
        tmp = interval.n_max - st.x0;
        mpz_fdiv_q(t_hi.get_mpz_t(), tmp.get_mpz_t(), product.get_mpz_t());
        if (t_lo > t_hi) continue;
        // Walk outward from the lattice point nearest the predicted centre,
        // keeping candidates with v nearest mu when the cap binds.
        BigInt t_centre;
        tmp = centre - st.x0 + product / 2;
        mpz_fdiv_q(t_centre.get_mpz_t(), tmp.get_mpz_t(), product.get_mpz_t());
        if (t_centre < t_lo) t_centre = t_lo;
        if (t_centre > t_hi) t_centre = t_hi;

        std::size_t emitted = 0;
        BigInt down = t_centre, up = t_centre + 1;
        bool take_down = true;
        while ((down >= t_lo || up <= t_hi) && emitted < budget &&
               total < q.candidate_cap) {
            BigInt t;
            if (take_down && down >= t_lo) {
                t = down;
                down -= 1;
            } else if (up <= t_hi) {
                t = up;
                up += 1;
            } else if (down >= t_lo) {
                t = down;
                down -= 1;
            } else {
                break;
            }
            take_down = !take_down;
            BigInt n = st.x0 + t * product;
            if (n < 1) continue;
            detail::score_and_push(n, sign, top, q, seen);
            ++emitted;
            ++total;
        }
    }
    res.candidates = top.sorted();
    if (res.candidates.empty()) res.mode = SolverMode::None;
    return res;
}

// CRT mode: anchors grow until the product covers 10^mu; each beam state
// contributes the lattice points around the predicted magnitude.
inline SolverResult crt_solve(const SolverQuery& q,
                              const SearchInterval& interval, int beam_width) {
    SolverResult res;
    res.mode = SolverMode::CRT;
    if (interval.empty()) {
        res.mode = SolverMode::None;
        return res;
    }
    BigInt target = detail::pow10_ceil_d(q.mu);
    BigInt product;
    auto anchors =
        detail::select_anchors(q, target, q.anchor_threshold, product);
    if (anchors.empty()) {
        anchors = detail::select_anchors(q, target, q.anchor_fallback, product);
    }
    if (anchors.empty()) {
        res.mode = SolverMode::None;
        return res;
    }
    int sign = detail::predicted_sign(q);
    detail::reflect_anchors_for_sign(anchors, sign);
    auto states = detail::beam_states(anchors, beam_width);

    detail::TopK top(static_cast<std::size_t>(q.k));
    std::set<BigInt> seen;
    BigInt centre = detail::pow10_floor_d(std::max(q.mu - 1.0, 0.0));
    for (const auto& st : states) {
        BigInt t_star, tmp;
        tmp = centre - st.x0 + product / 2;
        mpz_fdiv_q(t_star.get_mpz_t(), tmp.get_mpz_t(), product.get_mpz_t());
        for (int dt = -1; dt <= 1; ++dt) {
            BigInt n = st.x0 + (t_star + dt) * product;
            if (n < interval.n_min || n > interval.n_max || n < 1) continue;
            detail::score_and_push(n, sign, top, q, seen);
        }
    }
    res.candidates = top.sorted();
    if (res.candidates.empty()) res.mode = SolverMode::None;
    return res;
}

// Full dispatch: zero shortcut, interval, Table-2 mode selection.
inline SolverResult solve(const SolverQuery& q) {
    if (q.k < 1) throw std::invalid_argument("k must be >= 1");
    if (detail::predicted_sign(q) == 2) {
        SolverResult res;
        res.mode = SolverMode::Zero;
        res.candidates = {{BigInt(0), 0.0}};
        return res;
    }
    SearchInterval interval = sigma_interval(q.mu, q.log_var);
    if (interval.empty()) {
        SolverResult res;
        res.mode = SolverMode::None;
        return res;
    }
    switch (select_mode(interval.width())) {
        case SolverMode::Dense:
            return dense_solve(q, interval);
        case SolverMode::Sieve:
            return sieve_solve(q, interval, q.beam_width);
        default:
            return crt_solve(q, interval, q.beam_width);
    }
}

}  // namespace intseq

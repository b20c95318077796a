#pragma once

#include <json.hpp>

#include <boost/math/distributions/students_t.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "intseq/corpus.hpp"
#include "intseq/model.hpp"
#include "intseq/solver.hpp"

namespace intseq {

struct ModeStats {
    double call_fraction = 0.0;
    double top1 = 0.0;
    std::size_t calls = 0;
};

struct EvalReport {
    double mag_acc = 0.0;
    double sign_acc = 0.0;
    double mma = 0.0;
    std::vector<double> per_modulus_acc;  // 100 entries
    std::vector<double> per_modulus_nig;
    std::map<std::string, double> bucket_mse;
    std::map<std::string, std::size_t> bucket_count;
    std::map<int, double> solver_topk;
    double valid_rate = 0.0;
    std::map<std::string, ModeStats> mode_breakdown;
    std::size_t masked_positions = 0;
    std::size_t solver_samples = 0;
};

// Fraction of masked positions with |v_hat - v| < 0.5 (strict).
inline double mag_accuracy(const std::vector<double>& preds,
                           const std::vector<double>& targets) {
    if (preds.size() != targets.size() || preds.empty()) {
        throw std::invalid_argument("mag_accuracy needs aligned nonempty inputs");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (std::fabs(preds[i] - targets[i]) < 0.5) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// Normalised information gain per modulus: 1 - CE_m / ln m.
inline std::vector<double> nig(const std::vector<double>& ce_per_modulus,
                               const std::vector<std::uint32_t>& moduli =
                                   default_moduli()) {
    if (ce_per_modulus.size() != moduli.size()) {
        throw std::invalid_argument("nig: size mismatch");
    }
    std::vector<double> out(moduli.size());
    for (std::size_t j = 0; j < moduli.size(); ++j) {
        out[j] = 1.0 - ce_per_modulus[j] / std::log(static_cast<double>(moduli[j]));
    }
    return out;
}

// Exact phi(m)/m as a reduced fraction, via trial-division factorization.
inline std::pair<std::uint64_t, std::uint64_t> totient_ratio(std::uint64_t m) {
    if (m < 2) throw std::invalid_argument("totient_ratio needs m >= 2");
    std::uint64_t num = 1, den = 1;
    std::uint64_t n = m;
    for (std::uint64_t p = 2; p * p <= n; ++p) {
        if (n % p == 0) {
            num *= p - 1;
            den *= p;
            while (n % p == 0) n /= p;
        }
    }
    if (n > 1) {
        num *= n - 1;
        den *= n;
    }
    std::uint64_t g = std::gcd(num, den);
    return {num / g, den / g};
}

struct Correlation {
    double r = 0.0;
    double p_value = 1.0;
};

// Sample Pearson correlation with a two-sided t-test p-value (n-2 dof).
inline Correlation pearson(const std::vector<double>& xs,
                           const std::vector<double>& ys) {
    const std::size_t n = xs.size();
    if (n != ys.size() || n < 3) {
        throw std::invalid_argument("pearson needs equal lengths >= 3");
    }
    double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw std::invalid_argument("pearson needs nonzero variance");
    }
    Correlation c;
    c.r = sxy / std::sqrt(sxx * syy);
    double r2 = std::min(c.r * c.r, 1.0);
    if (r2 >= 1.0) {
        c.p_value = 0.0;
        return c;
    }
    double dof = static_cast<double>(n - 2);
    double t = std::fabs(c.r) * std::sqrt(dof / (1.0 - r2));
    boost::math::students_t dist(dof);
    c.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, t));
    return c;
}

inline unsigned worker_threads() {
    if (const char* env = std::getenv("INTSEQ_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

// Order-preserving parallel map over [0, n); results land in fixed slots so
// parallelism never changes outputs.
template <typename Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
    unsigned threads = std::min<std::size_t>(worker_threads(), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// Masked-prediction evaluation: deterministic masking, metrics over every
// masked position, bucket MSE grouped by the true value's bucket.
inline EvalReport evaluate_masked(const Model& model,
                                  const std::vector<SequenceRecord>& records,
                                  std::uint64_t seed, double mask_p = 0.15) {
    const auto& moduli = model.config().moduli;
    struct Slot {
        std::size_t masked = 0, mag_hits = 0, sign_hits = 0;
        std::vector<std::size_t> mod_hits;
        std::vector<double> mod_ce;
        std::map<std::string, double> bucket_sq;
        std::map<std::string, std::size_t> bucket_n;
    };
    std::vector<Slot> slots(records.size());

    parallel_for(records.size(), [&](std::size_t idx) {
        const SequenceRecord& rec = records[idx];
        Slot& s = slots[idx];
        s.mod_hits.assign(moduli.size(), 0);
        s.mod_ce.assign(moduli.size(), 0.0);
        SplitMix64 rng = derive_stream(seed, "eval-mask/" + rec.id);
        std::vector<BigInt> terms =
            truncate_prefix(rec, static_cast<std::size_t>(model.config().max_len));
        MaskedSample sample = mask_sample(terms, mask_p, rng, moduli);
        PredictionBundle out = model.forward(sample);
        LossWeights w;
        LossSums sums = Model::bundle_loss_sums(sample, w, out, moduli);
        s.masked = sums.masked;
        s.mag_hits = sums.mag_hits;
        s.sign_hits = sums.sign_hits;
        for (std::size_t j = 0; j < moduli.size(); ++j) {
            s.mod_hits[j] = sums.mod_hits[j];
            s.mod_ce[j] = sums.mod_ce[j];
        }
        for (std::size_t i = 0; i < sample.length; ++i) {
            if (!sample.mask_flags[i]) continue;
            double err = out.mu_logvar(0, i) - sample.targets[i].v;
            std::string b = bucket_name(bucket_of(sample.values[i]));
            s.bucket_sq[b] += err * err;
            s.bucket_n[b] += 1;
        }
    });

    EvalReport rep;
    std::size_t masked = 0, mag_hits = 0, sign_hits = 0;
    std::vector<std::size_t> mod_hits(moduli.size(), 0);
    std::vector<double> mod_ce(moduli.size(), 0.0);
    std::map<std::string, double> bucket_sq;
    std::map<std::string, std::size_t> bucket_n;
    for (const auto& s : slots) {
        masked += s.masked;
        mag_hits += s.mag_hits;
        sign_hits += s.sign_hits;
        for (std::size_t j = 0; j < moduli.size(); ++j) {
            mod_hits[j] += s.mod_hits[j];
            mod_ce[j] += s.mod_ce[j];
        }
        for (const auto& [k, v] : s.bucket_sq) bucket_sq[k] += v;
        for (const auto& [k, v] : s.bucket_n) bucket_n[k] += v;
    }
    if (masked == 0) throw std::invalid_argument("no masked positions");
    double n = static_cast<double>(masked);
    rep.masked_positions = masked;
    rep.mag_acc = static_cast<double>(mag_hits) / n;
    rep.sign_acc = static_cast<double>(sign_hits) / n;
    rep.per_modulus_acc.resize(moduli.size());
    std::vector<double> mean_ce(moduli.size());
    for (std::size_t j = 0; j < moduli.size(); ++j) {
        rep.per_modulus_acc[j] = static_cast<double>(mod_hits[j]) / n;
        mean_ce[j] = mod_ce[j] / n;
    }
    rep.per_modulus_nig = nig(mean_ce, moduli);
    rep.mma = std::accumulate(rep.per_modulus_acc.begin(),
                              rep.per_modulus_acc.end(), 0.0) /
              static_cast<double>(moduli.size());
    for (const auto& [k, v] : bucket_sq) {
        rep.bucket_mse[k] = v / static_cast<double>(bucket_n.at(k));
        rep.bucket_count[k] = bucket_n.at(k);
    }
    return rep;
}

// Builds a solver query from the model outputs at one position.
inline SolverQuery query_from_predictions(const PredictionBundle& out,
                                          int position,
                                          const std::vector<std::uint32_t>& moduli,
                                          int k, int beam_width) {
    SolverQuery q;
    q.moduli = moduli;
    q.k = k;
    q.beam_width = beam_width;
    q.mu = out.mu_logvar(0, position);
    q.log_var = out.mu_logvar(1, position);
    {
        VectorXd l = out.sign_logits.col(position);
        double mx = l.maxCoeff();
        VectorXd e = (l.array() - mx).exp();
        VectorXd p = e / e.sum();
        for (int i = 0; i < 3; ++i) q.sign_probs[i] = p(i);
    }
    int offset = 0;
    q.residue_probs.resize(moduli.size());
    for (std::size_t j = 0; j < moduli.size(); ++j) {
        int m = static_cast<int>(moduli[j]);
        VectorXd l = out.mod_logits.col(position).segment(offset, m);
        double mx = l.maxCoeff();
        VectorXd e = (l.array() - mx).exp();
        VectorXd p = e / e.sum();
        q.residue_probs[j].assign(p.data(), p.data() + m);
        offset += m;
    }
    return q;
}

// Next-term Solver evaluation: the final position of each sampled sequence is
// masked, all preceding terms are context; `none` returns count as misses.
inline EvalReport evaluate_solver(const Model& model,
                                  const std::vector<SequenceRecord>& records,
                                  std::size_t n_samples,
                                  const std::vector<int>& ks,
                                  std::uint64_t seed, int beam_width = 64) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].terms.size() >= 10) eligible.push_back(i);
    }
    SplitMix64 rng = derive_stream(seed, "solver-sample");
    fisher_yates_shuffle(eligible, rng);
    if (eligible.size() > n_samples) eligible.resize(n_samples);
    if (eligible.empty()) throw std::invalid_argument("no eligible sequences");

    int max_k = *std::max_element(ks.begin(), ks.end());
    struct Slot {
        std::string mode;
        bool valid = false;
        std::map<int, bool> hit;
    };
    std::vector<Slot> slots(eligible.size());
    const auto& moduli = model.config().moduli;

    parallel_for(eligible.size(), [&](std::size_t idx) {
        const SequenceRecord& rec = records[eligible[idx]];
        std::vector<BigInt> terms =
            truncate_prefix(rec, static_cast<std::size_t>(model.config().max_len));
        MaskedSample sample = featurize(terms, moduli);
        int last = static_cast<int>(sample.length) - 1;
        sample.mask_flags[last] = true;
        PredictionBundle out = model.forward(sample);
        SolverQuery q =
            query_from_predictions(out, last, moduli, max_k, beam_width);
        SolverResult res;
        try {
            res = solve(q);
        } catch (const ResourceError&) {
            res.mode = SolverMode::None;
        }
        Slot& s = slots[idx];
        s.mode = solver_mode_name(res.mode);
        s.valid = !res.candidates.empty();
        const BigInt& truth = terms.back();
        for (int k : ks) {
            bool hit = false;
            for (int c = 0; c < std::min<int>(k, res.candidates.size()); ++c) {
                if (res.candidates[c].first == truth) {
                    hit = true;
                    break;
                }
            }
            s.hit[k] = hit;
        }
    });

    EvalReport rep;
    rep.solver_samples = slots.size();
    std::size_t valid = 0;
    std::map<int, std::size_t> hits;
    std::map<std::string, std::size_t> mode_calls, mode_top1;
    for (const auto& s : slots) {
        if (s.valid) ++valid;
        for (const auto& [k, h] : s.hit) {
            if (h) ++hits[k];
        }
        mode_calls[s.mode] += 1;
        if (s.hit.count(1) && s.hit.at(1)) mode_top1[s.mode] += 1;
    }
    double n = static_cast<double>(slots.size());
    rep.valid_rate = static_cast<double>(valid) / n;
    for (int k : ks) {
        rep.solver_topk[k] = static_cast<double>(hits[k]) / n;
    }
    for (const auto& [mode, calls] : mode_calls) {
        ModeStats ms;
        ms.calls = calls;
        ms.call_fraction = static_cast<double>(calls) / n;
        ms.top1 = calls ? static_cast<double>(mode_top1[mode]) /
                              static_cast<double>(calls)
                        : 0.0;
        rep.mode_breakdown[mode] = ms;
    }
    return rep;
}

inline nlohmann::json report_to_json(const EvalReport& rep,
                                     const std::vector<std::uint32_t>& moduli =
                                         default_moduli()) {
    nlohmann::json j;
    j["mag_acc"] = rep.mag_acc;
    j["sign_acc"] = rep.sign_acc;
    j["mma"] = rep.mma;
    j["masked_positions"] = rep.masked_positions;
    j["per_modulus"] = nlohmann::json::array();
    for (std::size_t i = 0; i < rep.per_modulus_acc.size(); ++i) {
        auto [num, den] = totient_ratio(moduli[i]);
        j["per_modulus"].push_back(
            {{"m", moduli[i]},
             {"acc", rep.per_modulus_acc[i]},
             {"nig", rep.per_modulus_nig[i]},
             {"phi_ratio", static_cast<double>(num) / static_cast<double>(den)}});
    }
    j["bucket_mse"] = rep.bucket_mse;
    j["bucket_count"] = rep.bucket_count;
    nlohmann::json topk = nlohmann::json::object();
    for (const auto& [k, v] : rep.solver_topk) topk[std::to_string(k)] = v;
    j["solver_topk"] = topk;
    j["valid_rate"] = rep.valid_rate;
    j["solver_samples"] = rep.solver_samples;
    nlohmann::json modes = nlohmann::json::object();
    for (const auto& [mode, ms] : rep.mode_breakdown) {
        modes[mode] = {{"call_fraction", ms.call_fraction},
                       {"top1", ms.top1},
                       {"calls", ms.calls}};
    }
    j["mode_breakdown"] = modes;
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport rep;
    rep.mag_acc = j.at("mag_acc").get<double>();
    rep.sign_acc = j.at("sign_acc").get<double>();
    rep.mma = j.at("mma").get<double>();
    rep.masked_positions = j.at("masked_positions").get<std::size_t>();
    for (const auto& row : j.at("per_modulus")) {
        rep.per_modulus_acc.push_back(row.at("acc").get<double>());
        rep.per_modulus_nig.push_back(row.at("nig").get<double>());
    }
    rep.bucket_mse =
        j.at("bucket_mse").get<std::map<std::string, double>>();
    rep.bucket_count =
        j.at("bucket_count").get<std::map<std::string, std::size_t>>();
    for (const auto& [k, v] : j.at("solver_topk").items()) {
        rep.solver_topk[std::stoi(k)] = v.get<double>();
    }
    rep.valid_rate = j.at("valid_rate").get<double>();
    rep.solver_samples = j.at("solver_samples").get<std::size_t>();
    for (const auto& [mode, ms] : j.at("mode_breakdown").items()) {
        ModeStats s;
        s.call_fraction = ms.at("call_fraction").get<double>();
        s.top1 = ms.at("top1").get<double>();
        s.calls = ms.at("calls").get<std::size_t>();
        rep.mode_breakdown[mode] = s;
    }
    return rep;
}

// NIG spectrum rows for external plotting: m,acc,nig,phi_ratio.
inline std::string spectrum_csv(const EvalReport& rep,
                                const std::vector<std::uint32_t>& moduli =
                                    default_moduli()) {
    std::string out = "m,acc,nig,phi_ratio\n";
    for (std::size_t i = 0; i < rep.per_modulus_acc.size(); ++i) {
        auto [num, den] = totient_ratio(moduli[i]);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%u,%.17g,%.17g,%.17g\n", moduli[i],
                      rep.per_modulus_acc[i], rep.per_modulus_nig[i],
                      static_cast<double>(num) / static_cast<double>(den));
        out += buf;
    }
    return out;
}

}  // namespace intseq

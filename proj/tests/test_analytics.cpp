#include <catch_amalgamated.hpp>

#include "intseq/analytics.hpp"

using namespace intseq;

namespace {

std::vector<SequenceRecord> tiny_corpus(int n, std::uint64_t seed = 31) {
    SplitMix64 rng(seed);
    std::vector<SequenceRecord> records;
    for (int i = 0; i < n; ++i) {
        SequenceRecord r;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "A%06d", i + 1);
        r.id = buf;
        std::size_t len = 10 + rng.bounded(10);
        for (std::size_t j = 0; j < len; ++j) {
            r.terms.push_back(BigInt(static_cast<long>(rng.bounded(100000)) -
                                     20000));
        }
        records.push_back(std::move(r));
    }
    return records;
}

// Brute-force Euler phi by gcd counting.
std::uint64_t phi_by_gcd(std::uint64_t m) {
    std::uint64_t count = 0;
    for (std::uint64_t a = 1; a <= m; ++a) {
        if (std::gcd(a, m) == 1) ++count;
    }
    return count;
}

}  // namespace

TEST_CASE("mag_accuracy uses a strict 0.5 threshold") {
    CHECK(mag_accuracy({1.0, 2.0}, {1.0, 2.0}) == 1.0);
    CHECK(mag_accuracy({1.5}, {1.0}) == 0.0);  // exactly 0.5 is a miss
    CHECK(mag_accuracy({1.2, 1.7}, {1.0, 1.0}) == 0.5);
    CHECK(mag_accuracy({1.499999}, {1.0}) == 1.0);
    CHECK_THROWS_AS(mag_accuracy({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(mag_accuracy({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("nig base cases") {
    std::vector<std::uint32_t> ms = {2, 3};
    auto out = nig({std::log(2.0), 0.0}, ms);
    CHECK(out[0] == Catch::Approx(0.0).margin(1e-15));
    CHECK(out[1] == 1.0);
    // CE above ln m goes negative, which is allowed.
    auto neg = nig({2.0 * std::log(2.0), std::log(3.0)}, ms);
    CHECK(neg[0] == Catch::Approx(-1.0));
    CHECK(neg[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK_THROWS_AS(nig({1.0}, ms), std::invalid_argument);
}

TEST_CASE("totient_ratio worked examples") {
    CHECK(totient_ratio(96) == std::pair<std::uint64_t, std::uint64_t>{1, 3});
    CHECK(totient_ratio(60) == std::pair<std::uint64_t, std::uint64_t>{4, 15});
    CHECK(totient_ratio(97) == std::pair<std::uint64_t, std::uint64_t>{96, 97});
    CHECK(totient_ratio(2) == std::pair<std::uint64_t, std::uint64_t>{1, 2});
    CHECK_THROWS_AS(totient_ratio(1), std::invalid_argument);
}

TEST_CASE("totient_ratio matches gcd counting for every modelled modulus") {
    for (std::uint32_t m : default_moduli()) {
        auto [num, den] = totient_ratio(m);
        // phi(m)/m = num/den exactly.
        CHECK(num * m == phi_by_gcd(m) * den);
        CHECK(std::gcd(num, den) == 1);
    }
}

TEST_CASE("pearson endpoints and significance behaviour") {
    std::vector<double> x = {1, 2, 3, 4, 5, 6};
    std::vector<double> y_up = {2, 4, 6, 8, 10, 12};
    auto c = pearson(x, y_up);
    CHECK(c.r == Catch::Approx(1.0));
    CHECK(c.p_value == Catch::Approx(0.0).margin(1e-12));

    std::vector<double> y_down = {6, 5, 4, 3, 2, 1};
    CHECK(pearson(x, y_down).r == Catch::Approx(-1.0));

    // Strong but imperfect correlation: small p.
    std::vector<double> y_noisy = {2.1, 3.9, 6.2, 7.8, 10.1, 11.7};
    auto strong = pearson(x, y_noisy);
    CHECK(strong.r > 0.99);
    CHECK(strong.p_value < 1e-4);

    // Shuffled data: |r| small, p large.
    SplitMix64 rng(8);
    std::vector<double> xs(200), ys(200);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = rng.uniform();
        ys[i] = rng.uniform();
    }
    auto weak = pearson(xs, ys);
    CHECK(std::fabs(weak.r) < 0.2);
    CHECK(weak.p_value > 0.01);

    CHECK_THROWS_AS(pearson({1, 2}, {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("pearson p-value agrees with a known table value") {
    // n=5, r=0.878 -> t ~ 3.18 with 3 dof -> p ~ 0.05 (two-sided).
    std::vector<double> x = {1, 2, 3, 4, 5};
    // Construct y with r close to 0.8783...
    std::vector<double> y = {1.0, 4.1, 2.2, 4.3, 5.2};
    auto c = pearson(x, y);
    double dof = 3.0;
    double t = std::fabs(c.r) * std::sqrt(dof / (1.0 - c.r * c.r));
    boost::math::students_t dist(dof);
    double expected = 2.0 * boost::math::cdf(boost::math::complement(dist, t));
    CHECK(c.p_value == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("evaluate_masked on an untrained model resembles chance") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    Model model(cfg, 42);
    auto records = tiny_corpus(60);
    EvalReport rep = evaluate_masked(model, records, 7, 0.3);

    REQUIRE(rep.per_modulus_acc.size() == 100);
    REQUIRE(rep.per_modulus_nig.size() == 100);
    CHECK(rep.masked_positions > 0);
    double mean_acc = std::accumulate(rep.per_modulus_acc.begin(),
                                      rep.per_modulus_acc.end(), 0.0) / 100.0;
    CHECK(rep.mma == Catch::Approx(mean_acc));
    // Near-uniform predictions: MMA close to mean(1/m) over m=2..101.
    double chance = 0.0;
    for (auto m : default_moduli()) chance += 1.0 / m;
    chance /= 100.0;
    CHECK(rep.mma == Catch::Approx(chance).margin(0.03));
    for (const auto& [bucket, mse] : rep.bucket_mse) {
        CHECK(mse >= 0.0);
        CHECK(rep.bucket_count.at(bucket) > 0);
    }
}

TEST_CASE("evaluate_masked is independent of the thread count") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    Model model(cfg, 42);
    auto records = tiny_corpus(24);
    setenv("INTSEQ_THREADS", "1", 1);
    EvalReport a = evaluate_masked(model, records, 7);
    setenv("INTSEQ_THREADS", "4", 1);
    EvalReport b = evaluate_masked(model, records, 7);
    unsetenv("INTSEQ_THREADS");
    CHECK(a.mag_acc == b.mag_acc);
    CHECK(a.mma == b.mma);
    CHECK(a.per_modulus_nig == b.per_modulus_nig);
    CHECK(a.bucket_mse == b.bucket_mse);
}

TEST_CASE("query_from_predictions produces normalized distributions") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    Model model(cfg, 9);
    auto records = tiny_corpus(1);
    MaskedSample s = featurize(records[0].terms);
    s.mask_flags.back() = true;
    PredictionBundle out = model.forward(s);
    SolverQuery q = query_from_predictions(
        out, static_cast<int>(s.length) - 1, cfg.moduli, 5, 64);
    CHECK(q.k == 5);
    double sp = q.sign_probs[0] + q.sign_probs[1] + q.sign_probs[2];
    CHECK(sp == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(q.residue_probs.size() == 100);
    for (std::size_t j = 0; j < q.residue_probs.size(); ++j) {
        double sum = std::accumulate(q.residue_probs[j].begin(),
                                     q.residue_probs[j].end(), 0.0);
        REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("evaluate_solver reports rates, mode breakdown, and topk") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    Model model(cfg, 42);
    auto records = tiny_corpus(30);
    EvalReport rep = evaluate_solver(model, records, 12, {1, 5, 10}, 3);
    CHECK(rep.solver_samples == 12);
    CHECK(rep.valid_rate >= 0.0);
    CHECK(rep.valid_rate <= 1.0);
    REQUIRE(rep.solver_topk.count(1) == 1);
    REQUIRE(rep.solver_topk.count(10) == 1);
    CHECK(rep.solver_topk[1] <= rep.solver_topk[5]);
    CHECK(rep.solver_topk[5] <= rep.solver_topk[10]);
    double frac = 0.0;
    for (const auto& [mode, ms] : rep.mode_breakdown) {
        frac += ms.call_fraction;
        CHECK(ms.top1 >= 0.0);
        CHECK(ms.top1 <= 1.0);
    }
    CHECK(frac == Catch::Approx(1.0).epsilon(1e-6));

    // Deterministic for a fixed seed.
    EvalReport again = evaluate_solver(model, records, 12, {1, 5, 10}, 3);
    CHECK(rep.solver_topk == again.solver_topk);
    CHECK(rep.valid_rate == again.valid_rate);
}

TEST_CASE("report JSON round-trip") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    Model model(cfg, 42);
    auto records = tiny_corpus(20);
    EvalReport rep = evaluate_masked(model, records, 7);
    EvalReport solver = evaluate_solver(model, records, 8, {1, 5}, 3);
    rep.solver_topk = solver.solver_topk;
    rep.valid_rate = solver.valid_rate;
    rep.mode_breakdown = solver.mode_breakdown;
    rep.solver_samples = solver.solver_samples;

    nlohmann::json j = report_to_json(rep);
    EvalReport back = report_from_json(j);
    CHECK(back.mag_acc == rep.mag_acc);
    CHECK(back.mma == rep.mma);
    CHECK(back.per_modulus_acc == rep.per_modulus_acc);
    CHECK(back.per_modulus_nig == rep.per_modulus_nig);
    CHECK(back.bucket_mse == rep.bucket_mse);
    CHECK(back.solver_topk == rep.solver_topk);
    CHECK(back.valid_rate == rep.valid_rate);
    CHECK(back.solver_samples == rep.solver_samples);
    for (const auto& [mode, ms] : rep.mode_breakdown) {
        CHECK(back.mode_breakdown.at(mode).call_fraction == ms.call_fraction);
        CHECK(back.mode_breakdown.at(mode).top1 == ms.top1);
    }
}

TEST_CASE("spectrum CSV carries one row per modulus with the phi ratio") {
    EvalReport rep;
    rep.per_modulus_acc.assign(100, 0.5);
    rep.per_modulus_nig.assign(100, 0.25);
    std::string csv = spectrum_csv(rep);
    REQUIRE(csv.rfind("m,acc,nig,phi_ratio\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 101);
    CHECK(csv.find("\n96,") != std::string::npos);
    // phi(96)/96 = 1/3.
    CHECK(csv.find("96,0.5,0.25,0.33333333333333331") != std::string::npos);
}

TEST_CASE("parallel_for propagates exceptions and covers every index") {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] = 1; });
    CHECK(std::accumulate(hits.begin(), hits.end(), 0) == 1000);
    CHECK_THROWS_AS(parallel_for(16,
                                 [](std::size_t i) {
                                     if (i == 7) throw std::runtime_error("x");
                                 }),
                    std::runtime_error);
}

#include <catch_amalgamated.hpp>

#include "intseq/model.hpp"

using namespace intseq;

namespace {

const std::vector<std::uint32_t> kSmallModuli = {2, 3, 5, 7, 11, 13, 17, 19};

ModelConfig check_config(Variant variant) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.layers = 2;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    cfg.moduli = kSmallModuli;
    return cfg;
}

// Scalar objective in sum form, matching the gradient seeds exactly.
double objective(const LossSums& s, const LossWeights& w,
                 const std::vector<std::uint32_t>& moduli) {
    double mod = 0.0;
    for (std::size_t j = 0; j < moduli.size(); ++j) {
        mod += s.mod_ce[j] / std::log(static_cast<double>(moduli[j]));
    }
    return w.mag * s.mag + w.sign * s.sign +
           w.mod * mod / static_cast<double>(moduli.size());
}

MaskedSample make_sample(const ModelConfig& cfg) {
    std::vector<BigInt> terms = {3, -14, 0, 159, 26, -5358, 979, 32, 3846, 264};
    MaskedSample s = featurize(terms, cfg.moduli);
    s.mask_flags[1] = true;
    s.mask_flags[4] = true;
    s.mask_flags[8] = true;
    return s;
}

// Central finite differences over a deterministic subset of every tensor.
double max_relative_error(Variant variant) {
    ModelConfig cfg = check_config(variant);
    Model model(cfg, 42);
    MaskedSample sample = make_sample(cfg);
    LossWeights w;  // 1, 1, 2

    ModelParams grads = ModelParams::shaped(cfg);
    model.forward_backward(sample, w, grads, nullptr);

    double worst = 0.0;
    SplitMix64 pick(7);
    std::vector<MatrixXd*> tensors;
    model.params().visit(
        [&](const std::string&, MatrixXd& t) { tensors.push_back(&t); });
    std::vector<const MatrixXd*> gtensors;
    grads.visit(
        [&](const std::string&, MatrixXd& t) { gtensors.push_back(&t); });

    auto central_fd = [&](MatrixXd& t, Eigen::Index r, Eigen::Index c,
                          double eps) {
        double saved = t(r, c);
        t(r, c) = saved + eps;
        double up = objective(model.loss_sums(sample, w), w, cfg.moduli);
        t(r, c) = saved - eps;
        double down = objective(model.loss_sums(sample, w), w, cfg.moduli);
        t(r, c) = saved;
        return (up - down) / (2.0 * eps);
    };

    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        MatrixXd& t = *tensors[ti];
        const MatrixXd& g = *gtensors[ti];
        int probes = 4;
        for (int attempt = 0; probes > 0 && attempt < 32; ++attempt) {
            Eigen::Index r = static_cast<Eigen::Index>(
                pick.bounded(static_cast<std::uint64_t>(t.rows())));
            Eigen::Index c = static_cast<Eigen::Index>(
                pick.bounded(static_cast<std::uint64_t>(t.cols())));
            double coarse = central_fd(t, r, c, 1e-4);
            double fine = central_fd(t, r, c, 1e-5);
            // Central differences are only valid where the objective is
            // smooth; a ReLU kink inside the probe window makes the two step
            // sizes disagree, so that entry is skipped. A wrong analytic
            // gradient cannot hide here: both estimates then agree with each
            // other and expose it.
            double fd_gap = std::fabs(coarse - fine) /
                            std::max({std::fabs(coarse), std::fabs(fine), 1e-4});
            if (fd_gap > 1e-3) continue;
            double analytic = g(r, c);
            double denom = std::max({std::fabs(fine), std::fabs(analytic),
                                     1e-4});
            worst = std::max(worst, std::fabs(fine - analytic) / denom);
            --probes;
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("analytic gradients match finite differences: dual-stream") {
    CHECK(max_relative_error(Variant::DualStream) < 1e-4);
}

TEST_CASE("analytic gradients match finite differences: magnitude-only") {
    CHECK(max_relative_error(Variant::MagnitudeOnly) < 1e-4);
}

TEST_CASE("analytic gradients match finite differences: vanilla tokens") {
    CHECK(max_relative_error(Variant::VanillaToken) < 1e-4);
}

TEST_CASE("backward leaves the log-variance output untrained") {
    ModelConfig cfg = check_config(Variant::DualStream);
    Model model(cfg, 42);
    MaskedSample sample = make_sample(cfg);
    LossWeights w;
    ModelParams grads = ModelParams::shaped(cfg);
    model.forward_backward(sample, w, grads, nullptr);
    // Row 1 of the magnitude head output is log sigma^2; its output-side
    // weights receive no gradient.
    CHECK(grads.head_mag_w2.row(1).isZero());
    CHECK(grads.head_mag_b2(1, 0) == 0.0);
    CHECK(!grads.head_mag_w2.row(0).isZero());
}

TEST_CASE("gradients vanish when nothing is masked beyond the forced one") {
    // All-zero loss weights produce all-zero gradients.
    ModelConfig cfg = check_config(Variant::DualStream);
    Model model(cfg, 42);
    MaskedSample sample = make_sample(cfg);
    LossWeights w;
    w.mag = w.sign = w.mod = 0.0;
    ModelParams grads = ModelParams::shaped(cfg);
    model.forward_backward(sample, w, grads, nullptr);
    bool all_zero = true;
    grads.visit([&](const std::string&, MatrixXd& g) {
        if (!g.isZero()) all_zero = false;
    });
    CHECK(all_zero);
}

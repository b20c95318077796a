#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "intseq/featurizer.hpp"
#include "intseq/rng.hpp"

namespace intseq {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Variant { DualStream, VanillaToken, MagnitudeOnly };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::DualStream: return "dual";
        case Variant::VanillaToken: return "vanilla";
        case Variant::MagnitudeOnly: return "ablation";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& name) {
    if (name == "dual") return Variant::DualStream;
    if (name == "vanilla") return Variant::VanillaToken;
    if (name == "ablation") return Variant::MagnitudeOnly;
    throw std::invalid_argument("unknown variant '" + name + "'");
}

struct ModelConfig {
    Variant variant = Variant::DualStream;
    int layers = 6;
    int d = 256;
    int heads = 4;
    int ffn_mult = 4;
    double dropout = 0.1;
    int max_len = 128;
    int vocab = 20003;  // VanillaToken only: values 0..19999 + PAD/MASK/UNK
    std::vector<std::uint32_t> moduli = default_moduli();

    int mod_feature_dim() const { return 2 * static_cast<int>(moduli.size()); }
    int residue_logit_dim() const {
        int total = 0;
        for (auto m : moduli) total += static_cast<int>(m);
        return total;
    }
    void validate() const {
        if (d <= 0 || heads <= 0 || d % heads != 0) {
            throw std::invalid_argument("hidden width must be divisible by heads");
        }
        if (layers < 0 || ffn_mult <= 0 || max_len < 1 || moduli.empty()) {
            throw std::invalid_argument("bad model config");
        }
    }

    static ModelConfig preset(const std::string& size, Variant variant) {
        ModelConfig cfg;
        cfg.variant = variant;
        if (size == "small") {
            cfg.layers = 6; cfg.d = 256; cfg.heads = 4;
        } else if (size == "middle") {
            cfg.layers = 8; cfg.d = 512; cfg.heads = 8;
        } else if (size == "large") {
            cfg.layers = 12; cfg.d = 768; cfg.heads = 12;
        } else {
            throw std::invalid_argument("unknown size preset '" + size + "'");
        }
        return cfg;
    }
};

// Vanilla-baseline special tokens.
inline constexpr int kPadToken = 20000;
inline constexpr int kMaskToken = 20001;
inline constexpr int kUnkToken = 20002;

inline int vanilla_token_id(const BigInt& x) {
    if (x < 0 || x >= 20000) return kUnkToken;
    return static_cast<int>(x.get_si());
}

struct AttentionParams {
    MatrixXd wq, wk, wv, wo;  // d x d
    MatrixXd bq, bk, bv, bo;  // d x 1
};

struct LayerParams {
    MatrixXd ln1_g, ln1_b, ln2_g, ln2_b;  // d x 1
    AttentionParams attn;
    MatrixXd ffn_w1, ffn_b1;  // (ffn_mult*d) x d, (ffn_mult*d) x 1
    MatrixXd ffn_w2, ffn_b2;  // d x (ffn_mult*d), d x 1
};

// All learnable tensors, addressable by stable names via visit(). Which
// groups exist depends on the variant.
struct ModelParams {
    ModelConfig config;

    // Dual-stream / magnitude-only embedding
    MatrixXd mag_w1, mag_b1, mag_w2, mag_b2;  // 4->d->d MLP
    MatrixXd mod_w, mod_b;                    // 200->d affine (dual only)
    MatrixXd film_wg, film_wb;                // d x d (dual only)
    MatrixXd mask_embed;                      // d x 1

    // Vanilla embedding
    MatrixXd token_embed;  // vocab x d

    std::vector<LayerParams> layers;
    MatrixXd lnf_g, lnf_b;

    MatrixXd head_mag_w1, head_mag_b1, head_mag_w2, head_mag_b2;  // d->d->2
    MatrixXd head_sign_w, head_sign_b;                            // 3 x d
    MatrixXd head_mod_w, head_mod_b;  // (sum m) x d, block rows per modulus

    bool has_dual_embed() const { return config.variant != Variant::VanillaToken; }
    bool has_mod_stream() const { return config.variant == Variant::DualStream; }
    bool has_token_embed() const { return config.variant == Variant::VanillaToken; }

    // Enumerates every tensor in a fixed order.
    template <typename F>
    void visit(F&& f) {
        if (has_dual_embed()) {
            f("embed.mag_w1", mag_w1); f("embed.mag_b1", mag_b1);
            f("embed.mag_w2", mag_w2); f("embed.mag_b2", mag_b2);
            if (has_mod_stream()) {
                f("embed.mod_w", mod_w); f("embed.mod_b", mod_b);
                f("embed.film_wg", film_wg); f("embed.film_wb", film_wb);
            }
            f("embed.mask", mask_embed);
        }
        if (has_token_embed()) f("embed.token", token_embed);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            std::string p = "encoder." + std::to_string(l) + ".";
            LayerParams& lp = layers[l];
            f(p + "ln1_g", lp.ln1_g); f(p + "ln1_b", lp.ln1_b);
            f(p + "attn.wq", lp.attn.wq); f(p + "attn.bq", lp.attn.bq);
            f(p + "attn.wk", lp.attn.wk); f(p + "attn.bk", lp.attn.bk);
            f(p + "attn.wv", lp.attn.wv); f(p + "attn.bv", lp.attn.bv);
            f(p + "attn.wo", lp.attn.wo); f(p + "attn.bo", lp.attn.bo);
            f(p + "ln2_g", lp.ln2_g); f(p + "ln2_b", lp.ln2_b);
            f(p + "ffn_w1", lp.ffn_w1); f(p + "ffn_b1", lp.ffn_b1);
            f(p + "ffn_w2", lp.ffn_w2); f(p + "ffn_b2", lp.ffn_b2);
        }
        f("encoder.lnf_g", lnf_g); f("encoder.lnf_b", lnf_b);
        f("head.mag_w1", head_mag_w1); f("head.mag_b1", head_mag_b1);
        f("head.mag_w2", head_mag_w2); f("head.mag_b2", head_mag_b2);
        f("head.sign_w", head_sign_w); f("head.sign_b", head_sign_b);
        f("head.mod_w", head_mod_w); f("head.mod_b", head_mod_b);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<ModelParams*>(this)->visit(
            [&](const std::string& name, MatrixXd& t) {
                f(name, static_cast<const MatrixXd&>(t));
            });
    }

    // Allocates every tensor with the shape implied by the config.
    static ModelParams shaped(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.config = cfg;
        int d = cfg.d;
        int f = cfg.ffn_mult * d;
        if (p.has_dual_embed()) {
            p.mag_w1 = MatrixXd::Zero(d, 4);  p.mag_b1 = MatrixXd::Zero(d, 1);
            p.mag_w2 = MatrixXd::Zero(d, d);  p.mag_b2 = MatrixXd::Zero(d, 1);
            if (p.has_mod_stream()) {
                p.mod_w = MatrixXd::Zero(d, cfg.mod_feature_dim());
                p.mod_b = MatrixXd::Zero(d, 1);
                p.film_wg = MatrixXd::Zero(d, d);
                p.film_wb = MatrixXd::Zero(d, d);
            }
            p.mask_embed = MatrixXd::Zero(d, 1);
        }
        if (p.has_token_embed()) p.token_embed = MatrixXd::Zero(cfg.vocab, d);
        p.layers.resize(cfg.layers);
        for (auto& lp : p.layers) {
            lp.ln1_g = MatrixXd::Zero(d, 1); lp.ln1_b = MatrixXd::Zero(d, 1);
            lp.ln2_g = MatrixXd::Zero(d, 1); lp.ln2_b = MatrixXd::Zero(d, 1);
            lp.attn.wq = MatrixXd::Zero(d, d); lp.attn.bq = MatrixXd::Zero(d, 1);
            lp.attn.wk = MatrixXd::Zero(d, d); lp.attn.bk = MatrixXd::Zero(d, 1);
            lp.attn.wv = MatrixXd::Zero(d, d); lp.attn.bv = MatrixXd::Zero(d, 1);
            lp.attn.wo = MatrixXd::Zero(d, d); lp.attn.bo = MatrixXd::Zero(d, 1);
            lp.ffn_w1 = MatrixXd::Zero(f, d); lp.ffn_b1 = MatrixXd::Zero(f, 1);
            lp.ffn_w2 = MatrixXd::Zero(d, f); lp.ffn_b2 = MatrixXd::Zero(d, 1);
        }
        p.lnf_g = MatrixXd::Zero(d, 1); p.lnf_b = MatrixXd::Zero(d, 1);
        p.head_mag_w1 = MatrixXd::Zero(d, d); p.head_mag_b1 = MatrixXd::Zero(d, 1);
        p.head_mag_w2 = MatrixXd::Zero(2, d); p.head_mag_b2 = MatrixXd::Zero(2, 1);
        p.head_sign_w = MatrixXd::Zero(3, d); p.head_sign_b = MatrixXd::Zero(3, 1);
        int r = cfg.residue_logit_dim();
        p.head_mod_w = MatrixXd::Zero(r, d); p.head_mod_b = MatrixXd::Zero(r, 1);
        return p;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const MatrixXd& t) { n += t.size(); });
        return n;
    }
};

namespace detail {

inline bool is_weight_name(const std::string& name) {
    // LayerNorm scales and all biases/embeddings get non-normal init below.
    return name.find("_b") == std::string::npos &&
           name.find("_g") == std::string::npos &&
           name.find("bq") == std::string::npos &&
           name.find("bk") == std::string::npos &&
           name.find("bv") == std::string::npos &&
           name.find("bo") == std::string::npos;
}

}  // namespace detail

// Truncated-normal(0.02) weights, zero biases, unit LayerNorm scales.
// FiLM projections start at zero so training begins at the magnitude-only
// identity. Each tensor gets its own (seed, name)-derived stream, so tensors
// shared by name across variants initialize identically.
inline void initialize_params(ModelParams& p, std::uint64_t seed) {
    p.visit([&](const std::string& name, MatrixXd& t) {
        if (name.ends_with("ln1_g") || name.ends_with("ln2_g") ||
            name.ends_with("lnf_g")) {
            t.setOnes();
            return;
        }
        if (name == "embed.film_wg" || name == "embed.film_wb") {
            t.setZero();
            return;
        }
        if (name == "embed.mask" || name == "embed.token" ||
            detail::is_weight_name(name)) {
            SplitMix64 rng = derive_stream(seed, "init/" + name);
            for (Eigen::Index c = 0; c < t.cols(); ++c)
                for (Eigen::Index r = 0; r < t.rows(); ++r)
                    t(r, c) = rng.truncated_normal(0.02);
            return;
        }
        t.setZero();
    });
}

// Standard sinusoidal positional encoding; column i is the encoding of
// position i, rows alternate sin/cos with frequencies 10000^(-2k/d).
inline MatrixXd positional_encoding(int length, int d) {
    MatrixXd pe(d, length);
    for (int pos = 0; pos < length; ++pos) {
        for (int k = 0; 2 * k < d; ++k) {
            double freq = std::pow(10000.0, -2.0 * k / d);
            pe(2 * k, pos) = std::sin(pos * freq);
            if (2 * k + 1 < d) pe(2 * k + 1, pos) = std::cos(pos * freq);
        }
    }
    return pe;
}

struct PredictionBundle {
    // Columns are positions.
    MatrixXd mu_logvar;    // 2 x L: row 0 = mu, row 1 = log sigma^2
    MatrixXd sign_logits;  // 3 x L
    MatrixXd mod_logits;   // (sum m) x L, blocks ordered m ascending
};

struct LossWeights {
    double mag = 1.0;
    double sign = 1.0;
    double mod = 2.0;
    double huber_delta = 1.0;
};

// Per-sample loss sums (not yet averaged over masked positions); the trainer
// divides by the batch-wide masked count so gradient accumulation matches a
// single concatenated batch exactly.
struct LossSums {
    double mag = 0.0;
    double sign = 0.0;
    std::vector<double> mod_ce;  // per modulus, sum over masked positions
    std::size_t masked = 0;
    // Correct-prediction counters for train/val metrics.
    std::size_t mag_hits = 0;
    std::size_t sign_hits = 0;
    std::vector<std::size_t> mod_hits;
};

namespace detail {

struct LayerNormCache {
    MatrixXd xhat;      // d x L
    Eigen::RowVectorXd istd;  // 1 x L
};

inline MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& g,
                           const MatrixXd& b, LayerNormCache* cache) {
    constexpr double eps = 1e-5;
    const double d = static_cast<double>(x.rows());
    Eigen::RowVectorXd mean = x.colwise().mean();
    MatrixXd centered = x.rowwise() - mean;
    Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    Eigen::RowVectorXd istd = (var.array() + eps).rsqrt();
    MatrixXd xhat = centered.array().rowwise() * istd.array();
    MatrixXd y = (xhat.array().colwise() * g.col(0).array()).colwise() +
                 b.col(0).array();
    if (cache) {
        cache->xhat = xhat;
        cache->istd = istd;
    }
    (void)d;
    return y;
}

inline MatrixXd layer_norm_backward(const MatrixXd& dy,
                                    const LayerNormCache& cache,
                                    const MatrixXd& g, MatrixXd& dg,
                                    MatrixXd& db) {
    dg.col(0).array() += (dy.array() * cache.xhat.array()).rowwise().sum();
    db.col(0).array() += dy.array().rowwise().sum();
    MatrixXd dxhat = dy.array().colwise() * g.col(0).array();
    Eigen::RowVectorXd m1 = dxhat.colwise().mean();
    Eigen::RowVectorXd m2 =
        (dxhat.array() * cache.xhat.array()).colwise().mean();
    MatrixXd dx = ((dxhat.rowwise() - m1).array() -
                   cache.xhat.array().rowwise() * m2.array());
    dx.array().rowwise() *= cache.istd.array();
    return dx;
}

// Row-wise softmax of an L x L score matrix.
inline MatrixXd row_softmax(const MatrixXd& s) {
    MatrixXd p(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double mx = s.row(i).maxCoeff();
        Eigen::RowVectorXd e = (s.row(i).array() - mx).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

// Column-wise softmax of a logits block.
inline MatrixXd col_softmax(const MatrixXd& s) {
    MatrixXd p(s.rows(), s.cols());
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
        double mx = s.col(c).maxCoeff();
        VectorXd e = (s.col(c).array() - mx).exp();
        p.col(c) = e / e.sum();
    }
    return p;
}

struct AttentionCache {
    MatrixXd q, k, v;              // d x L
    std::vector<MatrixXd> probs;   // per head, L x L
    MatrixXd concat;               // d x L (pre-Wo)
};

struct LayerCache {
    MatrixXd x_in;
    LayerNormCache ln1;
    MatrixXd n1;
    AttentionCache attn;
    MatrixXd attn_drop;  // mask/(1-p), empty when dropout off
    MatrixXd x_mid;
    LayerNormCache ln2;
    MatrixXd n2;
    MatrixXd ffn_pre;  // f x L, pre-ReLU
    MatrixXd ffn_act;
    MatrixXd ffn_drop;
};

struct ForwardCache {
    // embedding
    MatrixXd f_mag, f_mod;
    MatrixXd mag_pre, mag_hidden, h_mag;
    MatrixXd mod_pre, h_mod, mod_drop;
    MatrixXd gamma, beta;
    std::vector<int> token_ids;
    std::vector<bool> mask_flags;
    std::vector<LayerCache> layers;
    LayerNormCache lnf;
    MatrixXd z;
    MatrixXd head_mag_pre, head_mag_hidden;
};

}  // namespace detail

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, std::uint64_t seed)
        : params_(ModelParams::shaped(cfg)) {
        initialize_params(params_, seed);
        pe_ = positional_encoding(cfg.max_len, cfg.d);
    }
    explicit Model(ModelParams params) : params_(std::move(params)) {
        pe_ = positional_encoding(params_.config.max_len, params_.config.d);
    }

    const ModelConfig& config() const { return params_.config; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }
    std::size_t param_count() const { return params_.scalar_count(); }

    // Inference forward, dropout disabled.
    PredictionBundle forward(const MaskedSample& sample) const {
        detail::ForwardCache cache;
        return run_forward(sample, nullptr, cache);
    }

    // Training forward + backward. Gradients of the *sum-form* weighted loss
    // are accumulated into `grads`; dropout_rng enables dropout when non-null.
    LossSums forward_backward(const MaskedSample& sample,
                              const LossWeights& weights, ModelParams& grads,
                              SplitMix64* dropout_rng) const {
        detail::ForwardCache cache;
        PredictionBundle out = run_forward(sample, dropout_rng, cache);
        return run_backward(sample, weights, out, cache, grads);
    }

    // Loss sums without gradient work (validation).
    LossSums loss_sums(const MaskedSample& sample,
                       const LossWeights& weights) const {
        PredictionBundle out = forward(sample);
        return compute_loss_sums(sample, weights, out, nullptr, nullptr,
                                 nullptr);
    }

    static LossSums bundle_loss_sums(const MaskedSample& sample,
                                     const LossWeights& weights,
                                     const PredictionBundle& out,
                                     const std::vector<std::uint32_t>& moduli) {
        return compute_loss_sums_impl(sample, weights, out, moduli, nullptr,
                                      nullptr, nullptr);
    }

private:
    ModelParams params_;
    MatrixXd pe_;

    static MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }

    MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols,
                          SplitMix64* rng) const {
        double p = params_.config.dropout;
        if (!rng || p <= 0.0) return MatrixXd();
        MatrixXd m(rows, cols);
        double scale = 1.0 / (1.0 - p);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r)
                m(r, c) = rng->uniform() < p ? 0.0 : scale;
        return m;
    }

    PredictionBundle run_forward(const MaskedSample& sample, SplitMix64* rng,
                                 detail::ForwardCache& cache) const {
        const ModelConfig& cfg = params_.config;
        const int L = static_cast<int>(sample.length);
        if (L < 1 || L > cfg.max_len) {
            throw std::invalid_argument("sequence length exceeds max_len");
        }
        const int d = cfg.d;
        cache.mask_flags.assign(sample.mask_flags.begin(),
                                sample.mask_flags.end());

        MatrixXd e(d, L);
        if (params_.has_token_embed()) {
            cache.token_ids.resize(L);
            for (int i = 0; i < L; ++i) {
                int tok = sample.mask_flags[i] ? kMaskToken
                                               : vanilla_token_id(sample.values[i]);
                cache.token_ids[i] = tok;
                e.col(i) = params_.token_embed.row(tok).transpose();
            }
        } else {
            cache.f_mag.resize(4, L);
            for (int i = 0; i < L; ++i) {
                const auto& mf = sample.mag_features[i];
                cache.f_mag(0, i) = mf.v;
                cache.f_mag(1, i) = mf.sign_onehot[0];
                cache.f_mag(2, i) = mf.sign_onehot[1];
                cache.f_mag(3, i) = mf.sign_onehot[2];
            }
            cache.mag_pre =
                (params_.mag_w1 * cache.f_mag).colwise() + params_.mag_b1.col(0);
            cache.mag_hidden = relu(cache.mag_pre);
            cache.h_mag = (params_.mag_w2 * cache.mag_hidden).colwise() +
                          params_.mag_b2.col(0);

            if (params_.has_mod_stream()) {
                const int fm = cfg.mod_feature_dim();
                cache.f_mod.resize(fm, L);
                for (int i = 0; i < L; ++i)
                    for (int j = 0; j < fm; ++j)
                        cache.f_mod(j, i) = sample.mod_features[i][j];
                cache.mod_pre =
                    (params_.mod_w * cache.f_mod).colwise() + params_.mod_b.col(0);
                cache.h_mod = relu(cache.mod_pre);
                cache.mod_drop = dropout_mask(d, L, rng);
                if (cache.mod_drop.size() > 0)
                    cache.h_mod.array() *= cache.mod_drop.array();
                cache.gamma = params_.film_wg * cache.h_mod;
                cache.beta = params_.film_wb * cache.h_mod;
                e = (1.0 + cache.gamma.array()) * cache.h_mag.array() +
                    cache.beta.array();
            } else {
                e = cache.h_mag;
            }
            for (int i = 0; i < L; ++i) {
                if (sample.mask_flags[i]) e.col(i) = params_.mask_embed.col(0);
            }
        }

        MatrixXd x = e + pe_.leftCols(L);

        cache.layers.resize(params_.layers.size());
        const int hn = cfg.heads;
        const int dk = d / hn;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
        for (std::size_t l = 0; l < params_.layers.size(); ++l) {
            const LayerParams& lp = params_.layers[l];
            detail::LayerCache& lc = cache.layers[l];
            lc.x_in = x;
            lc.n1 = detail::layer_norm(x, lp.ln1_g, lp.ln1_b, &lc.ln1);

            lc.attn.q = (lp.attn.wq * lc.n1).colwise() + lp.attn.bq.col(0);
            lc.attn.k = (lp.attn.wk * lc.n1).colwise() + lp.attn.bk.col(0);
            lc.attn.v = (lp.attn.wv * lc.n1).colwise() + lp.attn.bv.col(0);
            lc.attn.probs.resize(hn);
            lc.attn.concat.resize(d, L);
            for (int h = 0; h < hn; ++h) {
                auto qh = lc.attn.q.middleRows(h * dk, dk);
                auto kh = lc.attn.k.middleRows(h * dk, dk);
                auto vh = lc.attn.v.middleRows(h * dk, dk);
                MatrixXd scores = (qh.transpose() * kh) * inv_sqrt_dk;  // L x L
                lc.attn.probs[h] = detail::row_softmax(scores);
                lc.attn.concat.middleRows(h * dk, dk) =
                    vh * lc.attn.probs[h].transpose();
            }
            MatrixXd attn_out =
                (lp.attn.wo * lc.attn.concat).colwise() + lp.attn.bo.col(0);
            lc.attn_drop = dropout_mask(d, L, rng);
            if (lc.attn_drop.size() > 0)
                attn_out.array() *= lc.attn_drop.array();
            lc.x_mid = x + attn_out;

            lc.n2 = detail::layer_norm(lc.x_mid, lp.ln2_g, lp.ln2_b, &lc.ln2);
            lc.ffn_pre = (lp.ffn_w1 * lc.n2).colwise() + lp.ffn_b1.col(0);
            lc.ffn_act = relu(lc.ffn_pre);
            MatrixXd ffn_out =
                (lp.ffn_w2 * lc.ffn_act).colwise() + lp.ffn_b2.col(0);
            lc.ffn_drop = dropout_mask(d, L, rng);
            if (lc.ffn_drop.size() > 0) ffn_out.array() *= lc.ffn_drop.array();
            x = lc.x_mid + ffn_out;
        }

        cache.z = detail::layer_norm(x, params_.lnf_g, params_.lnf_b, &cache.lnf);

        PredictionBundle out;
        cache.head_mag_pre =
            (params_.head_mag_w1 * cache.z).colwise() + params_.head_mag_b1.col(0);
        cache.head_mag_hidden = relu(cache.head_mag_pre);
        out.mu_logvar = (params_.head_mag_w2 * cache.head_mag_hidden).colwise() +
                        params_.head_mag_b2.col(0);
        out.sign_logits =
            (params_.head_sign_w * cache.z).colwise() + params_.head_sign_b.col(0);
        out.mod_logits =
            (params_.head_mod_w * cache.z).colwise() + params_.head_mod_b.col(0);
        return out;
    }

    // Computes loss sums; when the d* outputs are non-null, also fills the
    // gradient seeds of the sum-form weighted loss.
    LossSums compute_loss_sums(const MaskedSample& sample,
                               const LossWeights& w, const PredictionBundle& out,
                               MatrixXd* d_mu_logvar, MatrixXd* d_sign,
                               MatrixXd* d_mod) const {
        return compute_loss_sums_impl(sample, w, out, params_.config.moduli,
                                      d_mu_logvar, d_sign, d_mod);
    }

    static LossSums compute_loss_sums_impl(
        const MaskedSample& sample, const LossWeights& w,
        const PredictionBundle& out, const std::vector<std::uint32_t>& moduli,
        MatrixXd* d_mu_logvar, MatrixXd* d_sign, MatrixXd* d_mod) {
        const int L = static_cast<int>(sample.length);
        LossSums sums;
        sums.mod_ce.assign(moduli.size(), 0.0);
        sums.mod_hits.assign(moduli.size(), 0);
        if (d_mu_logvar) d_mu_logvar->setZero(2, L);
        if (d_sign) d_sign->setZero(3, L);
        if (d_mod) d_mod->setZero(out.mod_logits.rows(), L);

        for (int i = 0; i < L; ++i) {
            if (!sample.mask_flags[i]) continue;
            ++sums.masked;
            const PositionTargets& t = sample.targets[i];

            // Huber on mu; log_var carries no training signal.
            double err = out.mu_logvar(0, i) - t.v;
            double delta = w.huber_delta;
            if (std::fabs(err) <= delta) {
                sums.mag += 0.5 * err * err;
                if (d_mu_logvar) (*d_mu_logvar)(0, i) = w.mag * err;
            } else {
                sums.mag += delta * (std::fabs(err) - 0.5 * delta);
                if (d_mu_logvar)
                    (*d_mu_logvar)(0, i) = w.mag * (err > 0 ? delta : -delta);
            }
            if (std::fabs(err) < 0.5) ++sums.mag_hits;

            // Sign cross-entropy.
            {
                VectorXd logits = out.sign_logits.col(i);
                double mx = logits.maxCoeff();
                VectorXd ex = (logits.array() - mx).exp();
                double z = ex.sum();
                int cls = static_cast<int>(t.sign);
                sums.sign += std::log(z) - (logits(cls) - mx);
                int argmax = 0;
                logits.maxCoeff(&argmax);
                if (argmax == cls) ++sums.sign_hits;
                if (d_sign) {
                    VectorXd p = ex / z;
                    p(cls) -= 1.0;
                    d_sign->col(i) = w.sign * p;
                }
            }

            // Per-modulus cross-entropy, each normalised by ln m downstream.
            int offset = 0;
            for (std::size_t j = 0; j < moduli.size(); ++j) {
                int m = static_cast<int>(moduli[j]);
                VectorXd logits = out.mod_logits.col(i).segment(offset, m);
                double mx = logits.maxCoeff();
                VectorXd ex = (logits.array() - mx).exp();
                double z = ex.sum();
                int cls = static_cast<int>(t.residues[j]);
                sums.mod_ce[j] += std::log(z) - (logits(cls) - mx);
                int argmax = 0;
                logits.maxCoeff(&argmax);
                if (argmax == cls) ++sums.mod_hits[j];
                if (d_mod) {
                    VectorXd p = ex / z;
                    p(cls) -= 1.0;
                    double scale =
                        w.mod / (static_cast<double>(moduli.size()) *
                                 std::log(static_cast<double>(m)));
                    d_mod->col(i).segment(offset, m) = scale * p;
                }
                offset += m;
            }
        }
        return sums;
    }

    LossSums run_backward(const MaskedSample& sample, const LossWeights& w,
                          const PredictionBundle& out,
                          const detail::ForwardCache& cache,
                          ModelParams& grads) const {
        const ModelConfig& cfg = params_.config;
        const int L = static_cast<int>(sample.length);
        const int d = cfg.d;

        MatrixXd d_mu_logvar, d_sign, d_mod;
        LossSums sums = compute_loss_sums(sample, w, out, &d_mu_logvar, &d_sign,
                                          &d_mod);

        // Heads.
        MatrixXd dz = MatrixXd::Zero(d, L);
        {
            grads.head_mag_w2 += d_mu_logvar * cache.head_mag_hidden.transpose();
            grads.head_mag_b2.col(0) += d_mu_logvar.rowwise().sum();
            MatrixXd dh = params_.head_mag_w2.transpose() * d_mu_logvar;
            dh = (cache.head_mag_pre.array() > 0.0).select(dh, 0.0);
            grads.head_mag_w1 += dh * cache.z.transpose();
            grads.head_mag_b1.col(0) += dh.rowwise().sum();
            dz += params_.head_mag_w1.transpose() * dh;

            grads.head_sign_w += d_sign * cache.z.transpose();
            grads.head_sign_b.col(0) += d_sign.rowwise().sum();
            dz += params_.head_sign_w.transpose() * d_sign;

            grads.head_mod_w += d_mod * cache.z.transpose();
            grads.head_mod_b.col(0) += d_mod.rowwise().sum();
            dz += params_.head_mod_w.transpose() * d_mod;
        }

        MatrixXd dx = detail::layer_norm_backward(dz, cache.lnf, params_.lnf_g,
                                                  grads.lnf_g, grads.lnf_b);

        const int hn = cfg.heads;
        const int dk = d / hn;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
        for (int l = static_cast<int>(params_.layers.size()) - 1; l >= 0; --l) {
            const LayerParams& lp = params_.layers[l];
            LayerParams& gl = grads.layers[l];
            const detail::LayerCache& lc = cache.layers[l];

            // FFN sublayer: x = x_mid + drop(ffn_out)
            MatrixXd d_ffn_out = dx;
            if (lc.ffn_drop.size() > 0)
                d_ffn_out.array() *= lc.ffn_drop.array();
            gl.ffn_w2 += d_ffn_out * lc.ffn_act.transpose();
            gl.ffn_b2.col(0) += d_ffn_out.rowwise().sum();
            MatrixXd d_act = lp.ffn_w2.transpose() * d_ffn_out;
            d_act = (lc.ffn_pre.array() > 0.0).select(d_act, 0.0);
            gl.ffn_w1 += d_act * lc.n2.transpose();
            gl.ffn_b1.col(0) += d_act.rowwise().sum();
            MatrixXd d_n2 = lp.ffn_w1.transpose() * d_act;
            MatrixXd d_x_mid =
                dx + detail::layer_norm_backward(d_n2, lc.ln2, lp.ln2_g,
                                                 gl.ln2_g, gl.ln2_b);

            // Attention sublayer: x_mid = x_in + drop(wo * concat + bo)
            MatrixXd d_attn_out = d_x_mid;
            if (lc.attn_drop.size() > 0)
                d_attn_out.array() *= lc.attn_drop.array();
            gl.attn.wo += d_attn_out * lc.attn.concat.transpose();
            gl.attn.bo.col(0) += d_attn_out.rowwise().sum();
            MatrixXd d_concat = lp.attn.wo.transpose() * d_attn_out;

            MatrixXd dq = MatrixXd::Zero(d, L);
            MatrixXd dkm = MatrixXd::Zero(d, L);
            MatrixXd dv = MatrixXd::Zero(d, L);
            for (int h = 0; h < hn; ++h) {
                auto qh = lc.attn.q.middleRows(h * dk, dk);
                auto kh = lc.attn.k.middleRows(h * dk, dk);
                auto vh = lc.attn.v.middleRows(h * dk, dk);
                auto d_ah = d_concat.middleRows(h * dk, dk);
                const MatrixXd& p = lc.attn.probs[h];

                MatrixXd dp = (vh.transpose() * d_ah).transpose();  // L x L
                dv.middleRows(h * dk, dk) = d_ah * p;
                // softmax row backward
                VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
                MatrixXd ds =
                    p.array() * (dp.array().colwise() - rowdot.array());
                dq.middleRows(h * dk, dk) = kh * ds.transpose() * inv_sqrt_dk;
                dkm.middleRows(h * dk, dk) = qh * ds * inv_sqrt_dk;
            }
            gl.attn.wq += dq * lc.n1.transpose();
            gl.attn.bq.col(0) += dq.rowwise().sum();
            gl.attn.wk += dkm * lc.n1.transpose();
            gl.attn.bk.col(0) += dkm.rowwise().sum();
            gl.attn.wv += dv * lc.n1.transpose();
            gl.attn.bv.col(0) += dv.rowwise().sum();
            MatrixXd d_n1 = lp.attn.wq.transpose() * dq +
                            lp.attn.wk.transpose() * dkm +
                            lp.attn.wv.transpose() * dv;
            dx = d_x_mid + detail::layer_norm_backward(d_n1, lc.ln1, lp.ln1_g,
                                                       gl.ln1_g, gl.ln1_b);
        }

        // Embedding backward; positional encoding is an additive constant.
        if (params_.has_token_embed()) {
            for (int i = 0; i < L; ++i) {
                grads.token_embed.row(cache.token_ids[i]) +=
                    dx.col(i).transpose();
            }
            return sums;
        }

        MatrixXd de = dx;
        for (int i = 0; i < L; ++i) {
            if (cache.mask_flags[i]) {
                grads.mask_embed.col(0) += de.col(i);
                de.col(i).setZero();
            }
        }
        MatrixXd d_hmag;
        if (params_.has_mod_stream()) {
            d_hmag = de.array() * (1.0 + cache.gamma.array());
            MatrixXd d_gamma = de.array() * cache.h_mag.array();
            grads.film_wg += d_gamma * cache.h_mod.transpose();
            grads.film_wb += de * cache.h_mod.transpose();
            MatrixXd d_hmod = params_.film_wg.transpose() * d_gamma +
                              params_.film_wb.transpose() * de;
            if (cache.mod_drop.size() > 0)
                d_hmod.array() *= cache.mod_drop.array();
            d_hmod = (cache.mod_pre.array() > 0.0).select(d_hmod, 0.0);
            grads.mod_w += d_hmod * cache.f_mod.transpose();
            grads.mod_b.col(0) += d_hmod.rowwise().sum();
        } else {
            d_hmag = de;
        }
        grads.mag_w2 += d_hmag * cache.mag_hidden.transpose();
        grads.mag_b2.col(0) += d_hmag.rowwise().sum();
        MatrixXd d_hidden = params_.mag_w2.transpose() * d_hmag;
        d_hidden = (cache.mag_pre.array() > 0.0).select(d_hidden, 0.0);
        grads.mag_w1 += d_hidden * cache.f_mag.transpose();
        grads.mag_b1.col(0) += d_hidden.rowwise().sum();
        return sums;
    }
};

}  // namespace intseq

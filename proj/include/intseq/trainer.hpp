#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "intseq/corpus.hpp"
#include "intseq/model.hpp"

namespace intseq {

struct TrainConfig {
    int epochs = 200;
    int batch_size = 32;
    int grad_accum = 2;  // effective batch 64
    double lr = 5e-5;
    double warmup_frac = 0.10;
    double weight_decay = 0.01;
    double mask_p = 0.15;
    std::uint64_t seed = 42;
    LossWeights weights;          // w_mag=1, w_sign=1, w_mod=2
    double grad_clip = 0.0;       // 0 disables clipping
    int checkpoint_every = 0;     // epochs; 0 = final only

    void validate() const {
        if (epochs < 1 || batch_size < 1 || grad_accum < 1 || lr <= 0 ||
            warmup_frac <= 0 || warmup_frac >= 1 || weight_decay < 0 ||
            mask_p < 0 || mask_p > 1) {
            throw std::invalid_argument("bad training config");
        }
    }
};

struct LossBreakdown {
    double total = 0.0;
    double mag = 0.0;
    double sign = 0.0;
    double mod = 0.0;
    std::size_t masked_count = 0;
    double mag_acc = 0.0;
    double sign_acc = 0.0;
    double mma = 0.0;
};

inline double huber(double error, double delta) {
    double a = std::fabs(error);
    if (a <= delta) return 0.5 * error * error;
    return delta * (a - 0.5 * delta);
}

// Mean Huber loss over masked positions.
inline double magnitude_loss(const std::vector<double>& mu,
                             const std::vector<double>& v_target,
                             double delta = 1.0) {
    if (mu.empty() || mu.size() != v_target.size()) {
        throw std::invalid_argument("magnitude_loss needs >=1 masked position");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) s += huber(mu[i] - v_target[i], delta);
    return s / static_cast<double>(mu.size());
}

// Mean sign cross-entropy over masked positions; logits is 3 x N.
inline double sign_loss(const MatrixXd& sign_logits,
                        const std::vector<int>& sign_class) {
    if (sign_logits.cols() == 0 ||
        sign_logits.cols() != static_cast<Eigen::Index>(sign_class.size())) {
        throw std::invalid_argument("sign_loss shape mismatch");
    }
    double s = 0.0;
    for (Eigen::Index i = 0; i < sign_logits.cols(); ++i) {
        VectorXd l = sign_logits.col(i);
        double mx = l.maxCoeff();
        double z = (l.array() - mx).exp().sum();
        s += std::log(z) - (l(sign_class[i]) - mx);
    }
    return s / static_cast<double>(sign_logits.cols());
}

// (1/|M|) sum_m CE_m / ln m with CE averaged over masked positions.
inline double modulo_loss(const MatrixXd& residue_logits,
                          const std::vector<std::vector<std::uint32_t>>& targets,
                          const std::vector<std::uint32_t>& moduli = default_moduli()) {
    const std::size_t n = targets.size();
    if (n == 0) throw std::invalid_argument("modulo_loss needs masked positions");
    double total = 0.0;
    int offset = 0;
    for (std::size_t j = 0; j < moduli.size(); ++j) {
        int m = static_cast<int>(moduli[j]);
        double ce = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            VectorXd l = residue_logits.col(i).segment(offset, m);
            double mx = l.maxCoeff();
            double z = (l.array() - mx).exp().sum();
            ce += std::log(z) - (l(targets[i][j]) - mx);
        }
        total += (ce / static_cast<double>(n)) / std::log(static_cast<double>(m));
        offset += m;
    }
    return total / static_cast<double>(moduli.size());
}

// Linear warmup to lr over the first warmup_frac of steps, then linear decay
// to zero.
inline double lr_at(std::size_t step, std::size_t total_steps, double lr,
                    double warmup_frac = 0.10) {
    if (total_steps == 0) return 0.0;
    double warmup = warmup_frac * static_cast<double>(total_steps);
    double s = static_cast<double>(step);
    if (s <= warmup) return lr * s / warmup;
    return lr * (static_cast<double>(total_steps) - s) /
           (static_cast<double>(total_steps) - warmup);
}

namespace detail {

// Accumulates sum-form losses and derives the averaged breakdown.
struct BatchAccumulator {
    double mag_sum = 0.0;
    double sign_sum = 0.0;
    std::vector<double> mod_ce_sum;
    std::size_t masked = 0;
    std::size_t mag_hits = 0;
    std::size_t sign_hits = 0;
    std::vector<std::size_t> mod_hits;

    void add(const LossSums& s) {
        if (mod_ce_sum.empty()) {
            mod_ce_sum.assign(s.mod_ce.size(), 0.0);
            mod_hits.assign(s.mod_ce.size(), 0);
        }
        mag_sum += s.mag;
        sign_sum += s.sign;
        for (std::size_t j = 0; j < s.mod_ce.size(); ++j) {
            mod_ce_sum[j] += s.mod_ce[j];
            mod_hits[j] += s.mod_hits[j];
        }
        masked += s.masked;
        mag_hits += s.mag_hits;
        sign_hits += s.sign_hits;
    }

    void add_accumulator(const BatchAccumulator& o) {
        if (mod_ce_sum.empty()) {
            mod_ce_sum.assign(o.mod_ce_sum.size(), 0.0);
            mod_hits.assign(o.mod_ce_sum.size(), 0);
        }
        mag_sum += o.mag_sum;
        sign_sum += o.sign_sum;
        for (std::size_t j = 0; j < o.mod_ce_sum.size(); ++j) {
            mod_ce_sum[j] += o.mod_ce_sum[j];
            mod_hits[j] += o.mod_hits[j];
        }
        masked += o.masked;
        mag_hits += o.mag_hits;
        sign_hits += o.sign_hits;
    }

    LossBreakdown breakdown(const std::vector<std::uint32_t>& moduli,
                            const LossWeights& w) const {
        LossBreakdown b;
        if (masked == 0) throw std::logic_error("no masked positions in batch");
        double n = static_cast<double>(masked);
        b.mag = mag_sum / n;
        b.sign = sign_sum / n;
        double mod = 0.0;
        double acc = 0.0;
        for (std::size_t j = 0; j < moduli.size(); ++j) {
            mod += (mod_ce_sum[j] / n) / std::log(static_cast<double>(moduli[j]));
            acc += static_cast<double>(mod_hits[j]) / n;
        }
        b.mod = mod / static_cast<double>(moduli.size());
        b.total = w.mag * b.mag + w.sign * b.sign + w.mod * b.mod;
        b.masked_count = masked;
        b.mag_acc = static_cast<double>(mag_hits) / n;
        b.sign_acc = static_cast<double>(sign_hits) / n;
        b.mma = acc / static_cast<double>(moduli.size());
        return b;
    }
};

inline void write_f32(std::ostream& out, const MatrixXd& t) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) {
        for (Eigen::Index r = 0; r < t.rows(); ++r) {
            float v = static_cast<float>(t(r, c));
            out.write(reinterpret_cast<const char*>(&v), sizeof(float));
        }
    }
}

inline void read_f32(std::istream& in, MatrixXd& t) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) {
        for (Eigen::Index r = 0; r < t.rows(); ++r) {
            float v = 0.0f;
            in.read(reinterpret_cast<char*>(&v), sizeof(float));
            t(r, c) = static_cast<double>(v);
        }
    }
}

}  // namespace detail

// Decoupled-weight-decay Adam. Parameters and moments are rounded to fp32
// after every step, so checkpoints (stored as fp32) resume bit-exactly.
class AdamW {
public:
    AdamW(const ModelConfig& cfg, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : m_(ModelParams::shaped(cfg)),
          v_(ModelParams::shaped(cfg)),
          weight_decay_(weight_decay),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps) {}

    std::size_t step_count() const { return step_; }
    ModelParams& moment1() { return m_; }
    ModelParams& moment2() { return v_; }
    void set_step_count(std::size_t s) { step_ = s; }

    void step(ModelParams& params, const ModelParams& grads, double lr) {
        ++step_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        // Walk the four tensor sets in lockstep (visit order is fixed).
        std::vector<MatrixXd*> pt, gt, mt, vt;
        collect(params, pt);
        collect(const_cast<ModelParams&>(grads), gt);
        collect(m_, mt);
        collect(v_, vt);
        for (std::size_t i = 0; i < pt.size(); ++i) {
            MatrixXd& p = *pt[i];
            const MatrixXd& g = *gt[i];
            MatrixXd& m = *mt[i];
            MatrixXd& v = *vt[i];
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = (beta2_ * v.array() + (1.0 - beta2_) * g.array().square()).matrix();
            MatrixXd mhat = m / bc1;
            MatrixXd vhat = v / bc2;
            p.array() -= lr * (mhat.array() / (vhat.array().sqrt() + eps_) +
                               weight_decay_ * p.array());
            quantize(p);
            quantize(m);
            quantize(v);
        }
    }

private:
    static void collect(ModelParams& set, std::vector<MatrixXd*>& out) {
        out.clear();
        set.visit([&](const std::string&, MatrixXd& t) { out.push_back(&t); });
    }
    static void quantize(MatrixXd& t) {
        for (Eigen::Index c = 0; c < t.cols(); ++c)
            for (Eigen::Index r = 0; r < t.rows(); ++r)
                t(r, c) = static_cast<double>(static_cast<float>(t(r, c)));
    }

    ModelParams m_, v_;
    std::size_t step_ = 0;
    double weight_decay_;
    double beta1_, beta2_, eps_;
};

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"variant", variant_name(cfg.variant)},
                          {"layers", cfg.layers},
                          {"d", cfg.d},
                          {"heads", cfg.heads},
                          {"ffn_mult", cfg.ffn_mult},
                          {"dropout", cfg.dropout},
                          {"max_len", cfg.max_len},
                          {"vocab", cfg.vocab},
                          {"moduli", cfg.moduli}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.variant = variant_from_name(j.at("variant").get<std::string>());
    cfg.layers = j.at("layers").get<int>();
    cfg.d = j.at("d").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.ffn_mult = j.at("ffn_mult").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.moduli = j.at("moduli").get<std::vector<std::uint32_t>>();
    return cfg;
}

struct Checkpoint {
    ModelParams params;
    std::size_t step = 0;
    std::size_t epoch = 0;
    bool has_moments = false;
    ModelParams moment1, moment2;
};

inline constexpr char kCheckpointMagic[9] = "ISQCKPT1";

// Versioned checkpoint: magic, uint64 header length, JSON header, then raw
// row-major fp32 little-endian tensor data in visit() order (params, then
// optimizer moments when present).
inline void save_checkpoint(const std::filesystem::path& path,
                            const ModelParams& params, std::size_t step,
                            std::size_t epoch, const ModelParams* m1 = nullptr,
                            const ModelParams* m2 = nullptr) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = config_to_json(params.config);
    header["step"] = step;
    header["epoch"] = epoch;
    header["optimizer_moments"] = (m1 != nullptr && m2 != nullptr);
    nlohmann::json tensors = nlohmann::json::array();
    params.visit([&](const std::string& name, const MatrixXd& t) {
        tensors.push_back({{"name", name},
                           {"rows", t.rows()},
                           {"cols", t.cols()}});
    });
    header["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    std::string hs = header.dump();
    std::uint64_t hlen = hs.size();
    out.write(kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    params.visit([&](const std::string&, const MatrixXd& t) {
        detail::write_f32(out, t);
    });
    if (m1 && m2) {
        m1->visit([&](const std::string&, const MatrixXd& t) {
            detail::write_f32(out, t);
        });
        m2->visit([&](const std::string&, const MatrixXd& t) {
            detail::write_f32(out, t);
        });
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("bad checkpoint magic in " + path.string());
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    Checkpoint ckpt;
    ModelConfig cfg = config_from_json(header.at("config"));
    ckpt.params = ModelParams::shaped(cfg);
    ckpt.step = header.at("step").get<std::size_t>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.has_moments = header.at("optimizer_moments").get<bool>();
    ckpt.params.visit([&](const std::string&, MatrixXd& t) {
        detail::read_f32(in, t);
    });
    if (ckpt.has_moments) {
        ckpt.moment1 = ModelParams::shaped(cfg);
        ckpt.moment2 = ModelParams::shaped(cfg);
        ckpt.moment1.visit([&](const std::string&, MatrixXd& t) {
            detail::read_f32(in, t);
        });
        ckpt.moment2.visit([&](const std::string&, MatrixXd& t) {
            detail::read_f32(in, t);
        });
    }
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    return ckpt;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    LossBreakdown train;
    LossBreakdown validation;
};

inline nlohmann::json breakdown_to_json(const LossBreakdown& b) {
    return nlohmann::json{{"total", b.total},       {"mag", b.mag},
                          {"sign", b.sign},         {"mod", b.mod},
                          {"masked_count", b.masked_count},
                          {"mag_acc", b.mag_acc},   {"sign_acc", b.sign_acc},
                          {"mma", b.mma}};
}

class Trainer {
public:
    Trainer(Model& model, const TrainConfig& cfg)
        : model_(model),
          cfg_(cfg),
          optimizer_(model.config(), cfg.weight_decay) {
        cfg.validate();
    }

    AdamW& optimizer() { return optimizer_; }

    // Full training loop. Masks are resampled every epoch; validation uses a
    // fixed (seed, epoch)-derived mask stream so curves are comparable.
    std::vector<EpochMetrics> train(
        const std::vector<SequenceRecord>& train_records,
        const std::vector<SequenceRecord>& val_records,
        const std::filesystem::path& out_dir, std::size_t start_epoch = 0) {
        if (train_records.empty()) {
            throw std::invalid_argument("empty training corpus");
        }
        std::filesystem::create_directories(out_dir);
        std::ofstream log(out_dir / "metrics.jsonl",
                          start_epoch == 0 ? std::ios::trunc : std::ios::app);

        const std::size_t steps_per_epoch = optimizer_steps_per_epoch(
            train_records.size());
        const std::size_t total_steps =
            steps_per_epoch * static_cast<std::size_t>(cfg_.epochs);

        std::vector<EpochMetrics> history;
        for (std::size_t epoch = start_epoch;
             epoch < static_cast<std::size_t>(cfg_.epochs); ++epoch) {
            detail::BatchAccumulator epoch_acc;
            auto order = epoch_order(train_records, epoch);

            std::size_t cursor = 0;
            ModelParams grads = ModelParams::shaped(model_.config());
            detail::BatchAccumulator step_acc;
            int micro = 0;
            while (cursor < order.size()) {
                std::size_t batch_end =
                    std::min(cursor + static_cast<std::size_t>(cfg_.batch_size),
                             order.size());
                for (std::size_t i = cursor; i < batch_end; ++i) {
                    const SequenceRecord& rec = *order[i];
                    MaskedSample sample = make_train_sample(rec, epoch);
                    SplitMix64 drop = derive_stream(
                        cfg_.seed ^ (epoch * 0x9E3779B1ULL),
                        "dropout/" + rec.id);
                    LossSums s = model_.forward_backward(
                        sample, cfg_.weights, grads,
                        model_.config().dropout > 0 ? &drop : nullptr);
                    if (!std::isfinite(s.mag) || !std::isfinite(s.sign)) {
                        throw std::runtime_error(
                            "non-finite loss at epoch " + std::to_string(epoch) +
                            ", sequence " + rec.id);
                    }
                    step_acc.add(s);
                }
                cursor = batch_end;
                ++micro;
                if (micro == cfg_.grad_accum || cursor == order.size()) {
                    apply_step(grads, step_acc, total_steps);
                    epoch_acc.add_accumulator(step_acc);
                    grads = ModelParams::shaped(model_.config());
                    step_acc = detail::BatchAccumulator{};
                    micro = 0;
                }
            }

            EpochMetrics em;
            em.epoch = epoch;
            em.step = optimizer_.step_count();
            em.lr = lr_at(optimizer_.step_count(), total_steps, cfg_.lr,
                          cfg_.warmup_frac);
            em.train = epoch_acc.breakdown(model_.config().moduli,
                                           cfg_.weights);
            em.validation = evaluate(val_records, epoch);
            history.push_back(em);

            nlohmann::json j{{"epoch", em.epoch},
                             {"step", em.step},
                             {"lr", em.lr},
                             {"train", breakdown_to_json(em.train)},
                             {"val", breakdown_to_json(em.validation)}};
            log << j.dump() << '\n';
            log.flush();

            if (cfg_.checkpoint_every > 0 &&
                (epoch + 1) % static_cast<std::size_t>(cfg_.checkpoint_every) ==
                    0) {
                save_checkpoint(out_dir / ("checkpoint-" + std::to_string(epoch + 1) +
                                           ".bin"),
                                model_.params(), optimizer_.step_count(),
                                epoch + 1, &optimizer_.moment1(),
                                &optimizer_.moment2());
            }
        }
        save_checkpoint(out_dir / "checkpoint-final.bin", model_.params(),
                        optimizer_.step_count(), cfg_.epochs,
                        &optimizer_.moment1(), &optimizer_.moment2());
        return history;
    }

    // Deterministic masked evaluation on a record set.
    LossBreakdown evaluate(const std::vector<SequenceRecord>& records,
                           std::size_t epoch) const {
        detail::BatchAccumulator acc;
        for (const auto& rec : records) {
            MaskedSample sample = make_val_sample(rec, epoch);
            acc.add(model_.loss_sums(sample, cfg_.weights));
        }
        if (records.empty()) return LossBreakdown{};
        return acc.breakdown(model_.config().moduli, cfg_.weights);
    }

    MaskedSample make_train_sample(const SequenceRecord& rec,
                                   std::size_t epoch) const {
        SplitMix64 rng = derive_stream(cfg_.seed ^ (epoch * 0x9E3779B97F4AULL),
                                       "mask/" + rec.id);
        std::vector<BigInt> terms = truncate_prefix(
            rec, static_cast<std::size_t>(model_.config().max_len));
        return mask_sample(terms, cfg_.mask_p, rng, model_.config().moduli);
    }

    MaskedSample make_val_sample(const SequenceRecord& rec,
                                 std::size_t epoch) const {
        SplitMix64 rng = derive_stream(cfg_.seed ^ (epoch * 0x9E3779B97F4AULL),
                                       "val-mask/" + rec.id);
        std::vector<BigInt> terms = truncate_prefix(
            rec, static_cast<std::size_t>(model_.config().max_len));
        return mask_sample(terms, cfg_.mask_p, rng, model_.config().moduli);
    }

    std::size_t optimizer_steps_per_epoch(std::size_t n_records) const {
        std::size_t micro_batches =
            (n_records + cfg_.batch_size - 1) / cfg_.batch_size;
        return (micro_batches + cfg_.grad_accum - 1) / cfg_.grad_accum;
    }

    // One optimizer step from accumulated sum-form gradients.
    void apply_step(ModelParams& grads, const detail::BatchAccumulator& acc,
                    std::size_t total_steps) {
        if (acc.masked == 0) throw std::logic_error("step with no masked positions");
        double scale = 1.0 / static_cast<double>(acc.masked);
        grads.visit([&](const std::string&, MatrixXd& g) { g *= scale; });
        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            grads.visit([&](const std::string&, MatrixXd& g) {
                sq += g.squaredNorm();
            });
            double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) {
                double k = cfg_.grad_clip / norm;
                grads.visit([&](const std::string&, MatrixXd& g) { g *= k; });
            }
        }
        double lr = lr_at(optimizer_.step_count() + 1, total_steps, cfg_.lr,
                          cfg_.warmup_frac);
        optimizer_.step(model_.params(), grads, lr);
    }

private:
    std::vector<const SequenceRecord*> epoch_order(
        const std::vector<SequenceRecord>& records, std::size_t epoch) const {
        std::vector<const SequenceRecord*> order;
        order.reserve(records.size());
        for (const auto& r : records) order.push_back(&r);
        SplitMix64 rng =
            derive_stream(cfg_.seed, "epoch-shuffle/" + std::to_string(epoch));
        fisher_yates_shuffle(order, rng);
        return order;
    }

    Model& model_;
    TrainConfig cfg_;
    AdamW optimizer_;
};

}  // namespace intseq

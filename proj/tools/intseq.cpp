// intseq: masked integer-sequence modelling pipeline.
// Subcommands: ingest, split, train, eval, solver-eval, solve, spectrum, report.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "intseq/analytics.hpp"
#include "intseq/corpus.hpp"
#include "intseq/solver.hpp"
#include "intseq/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;
constexpr const char* kArtifactVersion = "1.0.0";

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::ifstream open_input(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open input file: " + path.string());
    return in;
}

void write_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

// One manifest per CLI run, written next to the primary output.
struct ManifestWriter {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::chrono::steady_clock::time_point started =
        std::chrono::steady_clock::now();

    void write(const fs::path& dir) const {
        json j;
        j["command"] = command;
        j["config"] = config;
        j["config_hash"] = intseq::hash_label(config.dump());
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["wall_time_s"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          started)
                .count();
        j["artifact_version"] = kArtifactVersion;
        write_file(dir / ("manifest-" + command + ".json"), j.dump(2) + "\n");
    }
};

std::vector<intseq::SequenceRecord> load_corpus_dir(const fs::path& data_dir) {
    auto in = open_input(data_dir / "corpus.stripped");
    auto records = intseq::parse_stripped(in);
    fs::path kw_path = data_dir / "corpus.keywords";
    if (fs::exists(kw_path)) {
        auto kin = open_input(kw_path);
        auto kws = intseq::parse_keywords(kin);
        for (auto& rec : records) {
            auto it = kws.find(rec.id);
            if (it != kws.end()) rec.keywords = it->second;
        }
    }
    return records;
}

std::vector<intseq::SequenceRecord> load_split_records(
    const fs::path& data_dir, const std::string& split_name) {
    auto records = load_corpus_dir(data_dir);
    std::map<std::string, const intseq::SequenceRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    fs::path ids_path = data_dir / (split_name + ".ids");
    auto in = open_input(ids_path);
    std::vector<intseq::SequenceRecord> out;
    std::string id;
    while (std::getline(in, id)) {
        if (id.empty()) continue;
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw DataError("id " + id + " from " + ids_path.string() +
                            " missing in corpus");
        }
        out.push_back(*it->second);
    }
    return out;
}

intseq::Model load_model(const fs::path& checkpoint_path) {
    if (!fs::exists(checkpoint_path)) {
        throw DataError("checkpoint not found: " + checkpoint_path.string());
    }
    auto ckpt = intseq::load_checkpoint(checkpoint_path);
    return intseq::Model(std::move(ckpt.params));
}

std::vector<intseq::BigInt> parse_sequence_arg(const std::string& csv) {
    std::vector<intseq::BigInt> terms;
    std::stringstream ss(csv);
    std::string token;
    while (std::getline(ss, token, ',')) {
        std::size_t a = token.find_first_not_of(" \t");
        std::size_t b = token.find_last_not_of(" \t");
        if (a == std::string::npos) continue;
        try {
            terms.push_back(intseq::parse_bigint(token.substr(a, b - a + 1)));
        } catch (const std::invalid_argument& e) {
            throw DataError(std::string("bad sequence term: ") + e.what());
        }
    }
    if (terms.empty()) throw DataError("empty --sequence");
    return terms;
}

int run(int argc, char** argv) {
    CLI::App app{"Masked integer-sequence modelling over OEIS-style corpora"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Parse and filter a corpus");
    std::string ingest_stripped, ingest_keywords, ingest_out;
    ingest->add_option("--stripped", ingest_stripped, "OEIS stripped file")
        ->required();
    ingest->add_option("--keywords", ingest_keywords, "keyword file");
    ingest->add_option("--out", ingest_out, "output directory")->required();

    // split
    auto* split = app.add_subcommand("split", "Split an ingested corpus");
    std::string split_data, split_out, split_ratios = "8,1,1";
    std::uint64_t split_seed = 42;
    split->add_option("--data", split_data, "ingested corpus directory")
        ->required();
    split->add_option("--out", split_out, "output directory (default: data dir)");
    split->add_option("--seed", split_seed, "shuffle seed");
    split->add_option("--ratios", split_ratios, "train,val,test ratios");

    // train
    auto* train = app.add_subcommand("train", "Train a model");
    std::string train_config, train_data, train_out;
    std::string train_size = "small", train_variant = "dual";
    int train_epochs = -1;
    std::uint64_t train_seed = 42;
    bool train_seed_set = false;
    train->add_option("--config", train_config, "JSON training config");
    train->add_option("--data", train_data, "data directory with splits")
        ->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--size", train_size, "small|middle|large");
    train->add_option("--variant", train_variant, "dual|vanilla|ablation");
    train->add_option("--epochs", train_epochs, "override epoch count");
    train->add_option("--seed", train_seed, "training seed")
        ->each([&](const std::string&) { train_seed_set = true; });

    // eval
    auto* eval = app.add_subcommand("eval", "Masked-prediction evaluation");
    std::string eval_ckpt, eval_data, eval_split = "test",
                eval_out = "report.json";
    std::uint64_t eval_seed = 42;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "data directory")->required();
    eval->add_option("--split", eval_split, "train|validation|test");
    eval->add_option("--out", eval_out, "report path");
    eval->add_option("--seed", eval_seed, "mask seed");

    // solver-eval
    auto* seval = app.add_subcommand("solver-eval", "Next-term Solver evaluation");
    std::string seval_ckpt, seval_data, seval_split = "test",
                seval_out = "solver-report.json", seval_topk = "1,10";
    std::size_t seval_samples = 10000;
    int seval_beam = 64;
    std::uint64_t seval_seed = 42;
    seval->add_option("--checkpoint", seval_ckpt, "checkpoint path")->required();
    seval->add_option("--data", seval_data, "data directory")->required();
    seval->add_option("--split", seval_split, "split to sample from");
    seval->add_option("--samples", seval_samples, "number of sequences");
    seval->add_option("--topk", seval_topk, "comma-separated k values");
    seval->add_option("--beam", seval_beam, "beam width");
    seval->add_option("--seed", seval_seed, "sampling seed");
    seval->add_option("--out", seval_out, "report path");

    // solve
    auto* solve_cmd = app.add_subcommand("solve", "Predict the next term");
    std::string solve_ckpt, solve_sequence;
    int solve_topk = 10, solve_beam = 64;
    solve_cmd->add_option("--checkpoint", solve_ckpt, "checkpoint path")
        ->required();
    solve_cmd->add_option("--sequence", solve_sequence,
                          "comma-separated decimal terms")
        ->required();
    solve_cmd->add_option("--topk", solve_topk, "candidates to return");
    solve_cmd->add_option("--beam", solve_beam, "beam width");

    // spectrum
    auto* spectrum = app.add_subcommand("spectrum", "Export the NIG spectrum");
    std::string spectrum_report, spectrum_out = "spectrum.csv";
    spectrum->add_option("--report", spectrum_report, "report JSON")->required();
    spectrum->add_option("--out", spectrum_out, "CSV path");

    // report
    auto* report_cmd = app.add_subcommand("report", "Summarize a report");
    std::string report_path;
    report_cmd->add_option("--report", report_path, "report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    if (*ingest) {
        ManifestWriter mf;
        mf.command = "ingest";
        mf.inputs = {ingest_stripped};
        auto in = open_input(ingest_stripped);
        auto records = intseq::parse_stripped(in);
        std::map<std::string, std::set<std::string>> keywords;
        if (!ingest_keywords.empty()) {
            mf.inputs.push_back(ingest_keywords);
            auto kin = open_input(ingest_keywords);
            keywords = intseq::parse_keywords(kin);
        }
        auto filtered = intseq::filter_corpus(records, keywords);
        fs::create_directories(ingest_out);
        {
            std::ofstream out(fs::path(ingest_out) / "corpus.stripped");
            intseq::serialize_stripped(filtered, out);
        }
        {
            std::ofstream out(fs::path(ingest_out) / "corpus.keywords");
            for (const auto& rec : filtered) {
                if (rec.keywords.empty()) continue;
                out << rec.id << ' ';
                bool first = true;
                for (const auto& kw : rec.keywords) {
                    if (!first) out << ',';
                    out << kw;
                    first = false;
                }
                out << '\n';
            }
        }
        mf.config = {{"parsed", records.size()}, {"kept", filtered.size()}};
        mf.outputs = {(fs::path(ingest_out) / "corpus.stripped").string(),
                      (fs::path(ingest_out) / "corpus.keywords").string()};
        mf.write(ingest_out);
        std::cout << "kept " << filtered.size() << " of " << records.size()
                  << " sequences\n";
        return kExitOk;
    }

    if (*split) {
        if (split_out.empty()) split_out = split_data;
        ManifestWriter mf;
        mf.command = "split";
        mf.seed = split_seed;
        mf.inputs = {(fs::path(split_data) / "corpus.stripped").string()};
        auto records = load_corpus_dir(split_data);
        intseq::SplitRatios ratios;
        if (std::sscanf(split_ratios.c_str(), "%u,%u,%u", &ratios.train,
                        &ratios.validation, &ratios.test) != 3) {
            std::cerr << "bad --ratios, expected e.g. 8,1,1\n";
            return kExitUsage;
        }
        auto sp = intseq::split_corpus(records, split_seed, ratios);
        fs::create_directories(split_out);
        auto write_ids = [&](const char* name,
                             const std::vector<intseq::SequenceRecord>& rs) {
            std::string content;
            for (const auto& r : rs) content += r.id + "\n";
            write_file(fs::path(split_out) / (std::string(name) + ".ids"),
                       content);
        };
        write_ids("train", sp.train);
        write_ids("validation", sp.validation);
        write_ids("test", sp.test);
        json header = {{"seed", split_seed},
                       {"ratios", {ratios.train, ratios.validation, ratios.test}},
                       {"counts",
                        {{"train", sp.train.size()},
                         {"validation", sp.validation.size()},
                         {"test", sp.test.size()}}}};
        write_file(fs::path(split_out) / "split.json", header.dump(2) + "\n");
        mf.config = header;
        mf.outputs = {"train.ids", "validation.ids", "test.ids", "split.json"};
        mf.write(split_out);
        std::cout << header.dump(2) << "\n";
        return kExitOk;
    }

    if (*train) {
        intseq::TrainConfig tc;
        intseq::ModelConfig mc;
        json file_cfg = json::object();
        if (!train_config.empty()) {
            auto in = open_input(train_config);
            in >> file_cfg;
        }
        // precedence: flags > config file > defaults
        if (file_cfg.contains("size"))
            train_size = train->count("--size") ? train_size
                                                : file_cfg["size"].get<std::string>();
        if (file_cfg.contains("variant") && !train->count("--variant"))
            train_variant = file_cfg["variant"].get<std::string>();
        mc = intseq::ModelConfig::preset(train_size,
                                         intseq::variant_from_name(train_variant));
        auto pick_int = [&](const char* key, int& dst) {
            if (file_cfg.contains(key)) dst = file_cfg[key].get<int>();
        };
        auto pick_double = [&](const char* key, double& dst) {
            if (file_cfg.contains(key)) dst = file_cfg[key].get<double>();
        };
        pick_int("layers", mc.layers);
        pick_int("d", mc.d);
        pick_int("heads", mc.heads);
        pick_int("ffn_mult", mc.ffn_mult);
        pick_double("dropout", mc.dropout);
        pick_int("epochs", tc.epochs);
        pick_int("batch_size", tc.batch_size);
        pick_int("grad_accum", tc.grad_accum);
        pick_double("lr", tc.lr);
        pick_double("warmup_frac", tc.warmup_frac);
        pick_double("weight_decay", tc.weight_decay);
        pick_double("mask_p", tc.mask_p);
        pick_double("w_mag", tc.weights.mag);
        pick_double("w_sign", tc.weights.sign);
        pick_double("w_mod", tc.weights.mod);
        pick_double("huber_delta", tc.weights.huber_delta);
        pick_double("grad_clip", tc.grad_clip);
        pick_int("checkpoint_every", tc.checkpoint_every);
        if (file_cfg.contains("seed") && !train_seed_set)
            train_seed = file_cfg["seed"].get<std::uint64_t>();
        if (train_epochs > 0) tc.epochs = train_epochs;
        tc.seed = train_seed;

        ManifestWriter mf;
        mf.command = "train";
        mf.seed = tc.seed;
        mf.inputs = {train_data};
        mf.config = {{"size", train_size},
                     {"variant", train_variant},
                     {"epochs", tc.epochs},
                     {"batch_size", tc.batch_size},
                     {"grad_accum", tc.grad_accum},
                     {"lr", tc.lr},
                     {"warmup_frac", tc.warmup_frac},
                     {"weight_decay", tc.weight_decay},
                     {"mask_p", tc.mask_p},
                     {"seed", tc.seed},
                     {"model", intseq::config_to_json(mc)}};

        auto train_records = load_split_records(train_data, "train");
        auto val_records = load_split_records(train_data, "validation");
        intseq::Model model(mc, tc.seed);
        intseq::Trainer trainer(model, tc);
        auto history = trainer.train(train_records, val_records, train_out);
        mf.outputs = {(fs::path(train_out) / "metrics.jsonl").string(),
                      (fs::path(train_out) / "checkpoint-final.bin").string()};
        mf.write(train_out);
        if (!history.empty()) {
            const auto& last = history.back();
            std::cout << "final train loss " << last.train.total
                      << ", val loss " << last.validation.total << "\n";
        }
        return kExitOk;
    }

    if (*eval) {
        ManifestWriter mf;
        mf.command = "eval";
        mf.seed = eval_seed;
        mf.inputs = {eval_ckpt, eval_data};
        auto model = load_model(eval_ckpt);
        auto records = load_split_records(eval_data, eval_split);
        auto rep = intseq::evaluate_masked(model, records, eval_seed);
        write_file(eval_out,
                   intseq::report_to_json(rep, model.config().moduli).dump(2) +
                       "\n");
        mf.config = {{"split", eval_split}, {"seed", eval_seed}};
        mf.outputs = {eval_out};
        mf.write(fs::path(eval_out).parent_path().empty()
                     ? "."
                     : fs::path(eval_out).parent_path());
        std::cout << "mag_acc " << rep.mag_acc << " sign_acc " << rep.sign_acc
                  << " mma " << rep.mma << "\n";
        return kExitOk;
    }

    if (*seval) {
        ManifestWriter mf;
        mf.command = "solver-eval";
        mf.seed = seval_seed;
        mf.inputs = {seval_ckpt, seval_data};
        auto model = load_model(seval_ckpt);
        auto records = load_split_records(seval_data, seval_split);
        std::vector<int> ks;
        {
            std::stringstream ss(seval_topk);
            std::string tok;
            while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
        }
        if (ks.empty()) {
            std::cerr << "bad --topk\n";
            return kExitUsage;
        }
        auto rep = intseq::evaluate_solver(model, records, seval_samples, ks,
                                           seval_seed, seval_beam);
        write_file(seval_out,
                   intseq::report_to_json(rep, model.config().moduli).dump(2) +
                       "\n");
        mf.config = {{"split", seval_split},
                     {"samples", seval_samples},
                     {"topk", ks},
                     {"beam", seval_beam},
                     {"seed", seval_seed}};
        mf.outputs = {seval_out};
        mf.write(fs::path(seval_out).parent_path().empty()
                     ? "."
                     : fs::path(seval_out).parent_path());
        for (const auto& [k, v] : rep.solver_topk) {
            std::cout << "top-" << k << " " << v << "\n";
        }
        std::cout << "valid_rate " << rep.valid_rate << "\n";
        return kExitOk;
    }

    if (*solve_cmd) {
        auto model = load_model(solve_ckpt);
        auto terms = parse_sequence_arg(solve_sequence);
        // Next-term query: the given terms are context, one appended masked
        // position is predicted.
        std::vector<intseq::BigInt> padded = terms;
        padded.push_back(0);
        if (padded.size() > static_cast<std::size_t>(model.config().max_len)) {
            throw DataError("sequence longer than model max_len-1");
        }
        intseq::MaskedSample sample =
            intseq::featurize(padded, model.config().moduli);
        int last = static_cast<int>(sample.length) - 1;
        sample.mask_flags[last] = true;
        auto out = model.forward(sample);
        auto q = intseq::query_from_predictions(out, last, model.config().moduli,
                                                solve_topk, solve_beam);
        json result;
        try {
            auto res = intseq::solve(q);
            result["mode"] = intseq::solver_mode_name(res.mode);
            result["candidates"] = json::array();
            for (const auto& [value, score] : res.candidates) {
                result["candidates"].push_back(
                    {{"value", intseq::to_string(value)}, {"score", score}});
            }
        } catch (const intseq::ResourceError&) {
            result["mode"] = "none";
            result["candidates"] = json::array();
        }
        try {
            auto iv = intseq::sigma_interval(q.mu, q.log_var);
            result["interval"] = {{"n_min", intseq::to_string(iv.n_min)},
                                  {"n_max", intseq::to_string(iv.n_max)}};
        } catch (const intseq::ResourceError&) {
            result["interval"] = nullptr;
        }
        std::cout << result.dump(2) << "\n";
        return kExitOk;
    }

    if (*spectrum) {
        auto in = open_input(spectrum_report);
        json j;
        in >> j;
        auto rep = intseq::report_from_json(j);
        std::vector<std::uint32_t> moduli;
        for (const auto& row : j.at("per_modulus")) {
            moduli.push_back(row.at("m").get<std::uint32_t>());
        }
        write_file(spectrum_out, intseq::spectrum_csv(rep, moduli));
        ManifestWriter mf;
        mf.command = "spectrum";
        mf.inputs = {spectrum_report};
        mf.outputs = {spectrum_out};
        mf.write(fs::path(spectrum_out).parent_path().empty()
                     ? "."
                     : fs::path(spectrum_out).parent_path());
        return kExitOk;
    }

    if (*report_cmd) {
        auto in = open_input(report_path);
        json j;
        in >> j;
        auto rep = intseq::report_from_json(j);
        std::cout << "mag_acc   " << rep.mag_acc << "\n"
                  << "sign_acc  " << rep.sign_acc << "\n"
                  << "mma       " << rep.mma << "\n";
        for (const auto& [b, mse] : rep.bucket_mse) {
            std::cout << "mse[" << b << "] = " << mse << "\n";
        }
        for (const auto& [k, v] : rep.solver_topk) {
            std::cout << "solver top-" << k << " = " << v << "\n";
        }
        if (!rep.mode_breakdown.empty()) {
            std::cout << "valid_rate " << rep.valid_rate << "\n";
            for (const auto& [mode, ms] : rep.mode_breakdown) {
                std::cout << "mode " << mode << ": " << ms.call_fraction * 100
                          << "% of calls, top1 " << ms.top1 << "\n";
            }
        }
        return kExitOk;
    }

    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const intseq::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

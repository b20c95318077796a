#include <catch_amalgamated.hpp>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("INTSEQ_CLI");
    REQUIRE(p != nullptr);
    return p;
}

struct RunResult {
    int exit_code;
    std::string stdout_text;
};

RunResult run_cli(const std::string& args, const fs::path& workdir) {
    fs::path out_file = workdir / "cli-stdout.txt";
    std::string cmd = "cd " + workdir.string() + " && " + cli_path() + " " +
                      args + " > " + out_file.string() + " 2>cli-stderr.txt";
    int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    r.stdout_text = ss.str();
    return r;
}

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("intseq-cli-" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small synthetic corpus with simple structure (constants, arithmetic
// progressions) so a short training run stays finite and fast.
void write_corpus(const fs::path& dir, int n = 16) {
    std::string stripped;
    for (int i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "A%06d", i + 1);
        stripped += std::string(id) + " ,";
        long start = 1 + i;
        long step = 1 + i % 4;
        for (int t = 0; t < 12; ++t) {
            stripped += std::to_string(start + step * t) + ",";
        }
        stripped += "\n";
    }
    std::ofstream(dir / "raw.stripped") << stripped;
    std::ofstream(dir / "raw.keywords") << "A000001 nonn\nA000002 nonn,easy\n";
}

}  // namespace

TEST_CASE("help exits zero and lists subcommands") {
    auto dir = temp_dir("help");
    auto r = run_cli("--help", dir);
    CHECK(r.exit_code == 0);
    for (const char* sub : {"ingest", "split", "train", "eval", "solver-eval",
                            "solve", "spectrum", "report"}) {
        CHECK(r.stdout_text.find(sub) != std::string::npos);
    }
}

TEST_CASE("missing subcommand or flags is a usage error") {
    auto dir = temp_dir("usage");
    CHECK(run_cli("", dir).exit_code == 1);
    CHECK(run_cli("ingest", dir).exit_code == 1);       // missing required
    CHECK(run_cli("frobnicate", dir).exit_code == 1);   // unknown subcommand
}

TEST_CASE("missing input file is a data error") {
    auto dir = temp_dir("nofile");
    auto r = run_cli("ingest --stripped does-not-exist --out out", dir);
    CHECK(r.exit_code == 2);
}

TEST_CASE("malformed corpus is a data error with a line number") {
    auto dir = temp_dir("badcorpus");
    std::ofstream(dir / "bad.stripped") << "A000001 ,1,2,3,4,5,6,7,8,9,10,\n"
                                        << "this is not a record\n";
    auto r = run_cli("ingest --stripped bad.stripped --out out", dir);
    CHECK(r.exit_code == 2);
    std::string err = read_file(dir / "cli-stderr.txt");
    CHECK(err.find("2") != std::string::npos);
}

TEST_CASE("end-to-end pipeline on a tiny corpus") {
    auto dir = temp_dir("pipeline");
    write_corpus(dir);

    auto ingest = run_cli(
        "ingest --stripped raw.stripped --keywords raw.keywords --out data",
        dir);
    REQUIRE(ingest.exit_code == 0);
    CHECK(fs::exists(dir / "data/corpus.stripped"));
    CHECK(fs::exists(dir / "data/corpus.keywords"));
    CHECK(fs::exists(dir / "data/manifest-ingest.json"));

    auto split = run_cli("split --data data --seed 42", dir);
    REQUIRE(split.exit_code == 0);
    CHECK(fs::exists(dir / "data/train.ids"));
    CHECK(fs::exists(dir / "data/validation.ids"));
    CHECK(fs::exists(dir / "data/test.ids"));
    json split_header = json::parse(read_file(dir / "data/split.json"));
    CHECK(split_header.at("seed") == 42);

    json cfg = {{"layers", 1},      {"d", 16},        {"heads", 2},
                {"dropout", 0.0},   {"epochs", 2},    {"batch_size", 4},
                {"grad_accum", 1},  {"lr", 1e-3},     {"mask_p", 0.2},
                {"checkpoint_every", 0}};
    std::ofstream(dir / "train.json") << cfg.dump();
    auto train = run_cli(
        "train --config train.json --data data --out run --seed 42", dir);
    REQUIRE(train.exit_code == 0);
    REQUIRE(fs::exists(dir / "run/checkpoint-final.bin"));
    CHECK(fs::exists(dir / "run/metrics.jsonl"));
    json manifest = json::parse(read_file(dir / "run/manifest-train.json"));
    CHECK(manifest.at("command") == "train");
    CHECK(manifest.at("seed") == 42);
    CHECK(manifest.at("config").at("epochs") == 2);

    auto eval = run_cli(
        "eval --checkpoint run/checkpoint-final.bin --data data "
        "--split validation --out run/report.json --seed 7",
        dir);
    REQUIRE(eval.exit_code == 0);
    json report = json::parse(read_file(dir / "run/report.json"));
    CHECK(report.at("per_modulus").size() == 100);
    CHECK(report.at("mma").get<double>() >= 0.0);

    auto seval = run_cli(
        "solver-eval --checkpoint run/checkpoint-final.bin --data data "
        "--split validation --samples 2 --topk 1,5 "
        "--out run/solver-report.json --seed 7",
        dir);
    REQUIRE(seval.exit_code == 0);
    json sreport = json::parse(read_file(dir / "run/solver-report.json"));
    CHECK(sreport.at("solver_topk").contains("1"));
    CHECK(sreport.at("mode_breakdown").is_object());

    auto spectrum = run_cli(
        "spectrum --report run/report.json --out run/spectrum.csv", dir);
    REQUIRE(spectrum.exit_code == 0);
    std::string csv = read_file(dir / "run/spectrum.csv");
    CHECK(csv.rfind("m,acc,nig,phi_ratio\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 101);

    auto report_cmd = run_cli("report --report run/report.json", dir);
    REQUIRE(report_cmd.exit_code == 0);
    CHECK(report_cmd.stdout_text.find("mag_acc") != std::string::npos);
    CHECK(report_cmd.stdout_text.find("mma") != std::string::npos);

    auto solve = run_cli(
        "solve --checkpoint run/checkpoint-final.bin "
        "--sequence \"1,2,3,4,5,6,7,8,9,10\" --topk 5",
        dir);
    REQUIRE(solve.exit_code == 0);
    json solved = json::parse(solve.stdout_text);
    CHECK(solved.contains("mode"));
    CHECK(solved.at("candidates").is_array());
    if (!solved.at("candidates").empty()) {
        CHECK(solved.at("candidates")[0].contains("value"));
        CHECK(solved.at("candidates")[0].contains("score"));
    }
}

TEST_CASE("evaluation reports are byte-identical across runs") {
    auto dir = temp_dir("determinism");
    write_corpus(dir, 12);
    REQUIRE(run_cli("ingest --stripped raw.stripped --out data", dir)
                .exit_code == 0);
    REQUIRE(run_cli("split --data data --seed 42", dir).exit_code == 0);
    json cfg = {{"layers", 1},     {"d", 16},     {"heads", 2},
                {"dropout", 0.0},  {"epochs", 1}, {"batch_size", 4},
                {"grad_accum", 1}, {"lr", 1e-3}};
    std::ofstream(dir / "train.json") << cfg.dump();
    REQUIRE(run_cli("train --config train.json --data data --out run", dir)
                .exit_code == 0);
    REQUIRE(run_cli("eval --checkpoint run/checkpoint-final.bin --data data "
                    "--split validation --out a.json",
                    dir)
                .exit_code == 0);
    REQUIRE(run_cli("eval --checkpoint run/checkpoint-final.bin --data data "
                    "--split validation --out b.json",
                    dir)
                .exit_code == 0);
    CHECK(read_file(dir / "a.json") == read_file(dir / "b.json"));
}

TEST_CASE("missing split ids give a data error") {
    auto dir = temp_dir("nosplit");
    write_corpus(dir, 12);
    REQUIRE(run_cli("ingest --stripped raw.stripped --out data", dir)
                .exit_code == 0);
    // No split step: train cannot find train.ids.
    json cfg = {{"layers", 1}, {"d", 16}, {"heads", 2}, {"epochs", 1}};
    std::ofstream(dir / "train.json") << cfg.dump();
    auto r = run_cli("train --config train.json --data data --out run", dir);
    CHECK(r.exit_code == 2);
}

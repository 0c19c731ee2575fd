// End-to-end tests for the pesqdnn command-line tool.
//
// Each test drives the installed binary (path from the PESQDNN_BIN environment
// variable) as a subprocess and checks exit codes, stdout, and produced files.
// A shared workspace (synth dataset -> features -> tiny checkpoint) is built
// once and reused, since training is the slow step.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output; // stdout + stderr interleaved
};

const std::string& binary_path() {
    static const std::string path = [] {
        const char* p = std::getenv("PESQDNN_BIN");
        REQUIRE_MESSAGE(p != nullptr, "PESQDNN_BIN must point at the pesqdnn binary");
        return std::string(p);
    }();
    return path;
}

RunResult run(const std::string& args) {
    const std::string cmd = binary_path() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    char buf[4096];
    std::size_t n = 0;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE_MESSAGE(f.good(), "missing file: " << p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Shared workspace: 6 synthetic utterances (4 train / 1 dev / 1 test),
// amplitude features, and a checkpoint from a deliberately tiny model
// trained for 3 epochs. Built lazily on first use.
struct Workspace {
    fs::path root;
    fs::path manifest;
    fs::path features;
    fs::path checkpoint;
    fs::path config;

    Workspace() {
        root = fs::temp_directory_path() / "pesqdnn_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        manifest = root / "data" / "manifest.jsonl";
        features = root / "features";
        checkpoint = root / "tiny.ckpt";
        config = root / "tiny_config.json";

        RunResult synth =
            run("synth --out " + (root / "data").string() + " --count 6 --seed 7");
        REQUIRE_MESSAGE(synth.exit_code == 0, synth.output);

        RunResult feat = run("featurize --manifest " + manifest.string() + " --features " +
                             features.string() + " --mode amplitude");
        REQUIRE_MESSAGE(feat.exit_code == 0, feat.output);

        json cfg;
        cfg["encoder"] = {{{"kh", 3}, {"kw", 3}, {"maps", 2}, {"pool", "2x1"}},
                          {{"kh", 3}, {"kw", 3}, {"maps", 2}, {"pool", "2x2"}},
                          {{"kh", 3}, {"kw", 3}, {"maps", 4}, {"pool", "none"}}};
        cfg["multiwidth_maps"] = 2;
        cfg["blstm_hidden"] = 4;
        cfg["head_hidden"] = {4};
        cfg["attention_hidden"] = 4;
        {
            std::ofstream f(config);
            f << cfg.dump(2) << "\n";
        }

        RunResult train = run("train --train-manifest " + manifest.string() +
                              " --dev-manifest " + manifest.string() + " --features " +
                              features.string() + " --checkpoint " + checkpoint.string() +
                              " --config " + config.string() +
                              " --embedding fle --pooling at --loss fle"
                              " --seed 11 --lr 1e-4 --max-epochs 3");
        REQUIRE_MESSAGE(train.exit_code == 0, train.output);
    }
};

const Workspace& ws() {
    static Workspace w;
    return w;
}

} // namespace

TEST_CASE("help exits 0 and lists subcommands") {
    RunResult r = run("--help");
    CHECK(r.exit_code == 0);
    for (const char* sub : {"synth", "featurize", "train", "evaluate", "predict", "simulate-eid"})
        CHECK(r.output.find(sub) != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
    CHECK(run("").exit_code == 1);                       // subcommand required
    CHECK(run("no-such-subcommand").exit_code == 1);     // unknown subcommand
    CHECK(run("featurize").exit_code == 1);              // missing required --manifest
    CHECK(run("predict --checkpoint x.ckpt").exit_code == 1); // missing wav positional
}

TEST_CASE("validation errors exit 1") {
    RunResult r = run("simulate-eid --frames 10 --fer 0.1 --kind bogus");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("error:") != std::string::npos);
    CHECK(run("simulate-eid --frames 10 --fer 0.9").exit_code == 1); // fer > 0.5
}

TEST_CASE("missing input files exit 2") {
    RunResult feat = run("featurize --manifest /nonexistent/manifest.jsonl");
    CHECK(feat.exit_code == 2);
    CHECK(feat.output.find("data error:") != std::string::npos);
    CHECK(run("predict --checkpoint /nonexistent.ckpt " +
              (ws().root / "data" / "synth0000.wav").string())
              .exit_code == 2);
}

TEST_CASE("synth writes wavs and a loadable manifest") {
    const Workspace& w = ws();
    REQUIRE(fs::exists(w.manifest));
    std::ifstream f(w.manifest);
    std::string line;
    std::size_t lines = 0, train = 0, dev = 0, test = 0;
    while (std::getline(f, line)) {
        json j = json::parse(line);
        const std::string split = j.at("split").get<std::string>();
        train += split == "train";
        dev += split == "dev";
        test += split == "test";
        CHECK(fs::exists(j.at("audio").get<std::string>()));
        const double t = j.at("pesq_target").get<double>();
        CHECK(t >= 1.04);
        CHECK(t <= 4.64);
        ++lines;
    }
    CHECK(lines == 6);
    CHECK(train == 4);
    CHECK(dev == 1);
    CHECK(test == 1);
}

TEST_CASE("featurize writes index, norm stats, and one block file per utterance") {
    const Workspace& w = ws();
    json idx = json::parse(slurp(w.features / "index.json"));
    CHECK(idx.at("schema_version").get<int>() == 1);
    CHECK(idx.at("mode").get<std::string>() == "amplitude");
    const auto& utts = idx.at("utterances");
    REQUIRE(utts.size() == 6);
    for (const auto& u : utts) {
        CHECK(u.at("blocks").get<std::size_t>() >= 1);
        CHECK(fs::exists(w.features / (u.at("id").get<std::string>() + ".fbs")));
    }
    json stats = json::parse(slurp(w.features / "norm_stats.json"));
    CHECK(stats.contains("mean"));
    CHECK(stats.contains("stddev"));
}

TEST_CASE("train --print-config emits the effective canonical config") {
    const Workspace& w = ws();
    RunResult r = run("train --train-manifest " + w.manifest.string() + " --dev-manifest " +
                      w.manifest.string() + " --features " + w.features.string() +
                      " --config " + w.config.string() +
                      " --embedding fle --pooling at --seed 11 --print-config");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    json cfg = json::parse(r.output);
    CHECK(cfg.at("embedding").get<std::string>() == "fle");
    CHECK(cfg.at("pooling").get<std::string>() == "at");
    CHECK(cfg.at("input_channels").get<std::size_t>() == 1); // amplitude store
    CHECK(cfg.at("blstm_hidden").get<std::size_t>() == 4);
    CHECK(cfg.at("rng_seed").get<std::uint64_t>() == 11);
}

TEST_CASE("train produces a checkpoint and a JSON-lines log") {
    const Workspace& w = ws();
    REQUIRE(fs::exists(w.checkpoint));
    const fs::path log = w.root / "train.log";
    RunResult r = run("train --train-manifest " + w.manifest.string() + " --dev-manifest " +
                      w.manifest.string() + " --features " + w.features.string() +
                      " --checkpoint " + (w.root / "tiny2.ckpt").string() + " --config " +
                      w.config.string() +
                      " --embedding fle --pooling at --loss fle --seed 11 --lr 1e-4"
                      " --max-epochs 2 --log " +
                      log.string());
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    std::ifstream f(log);
    std::string line;
    std::size_t epochs = 0;
    while (std::getline(f, line)) {
        json j = json::parse(line);
        CHECK(j.at("epoch").get<std::size_t>() == epochs + 1);
        CHECK(std::isfinite(j.at("train_loss").get<double>()));
        CHECK(std::isfinite(j.at("dev_loss").get<double>()));
        CHECK(j.at("lr").get<double>() > 0.0);
        ++epochs;
    }
    CHECK(epochs == 2);
}

TEST_CASE("train rejects loss/embedding mismatches") {
    const Workspace& w = ws();
    RunResult r = run("train --train-manifest " + w.manifest.string() + " --dev-manifest " +
                      w.manifest.string() + " --features " + w.features.string() +
                      " --config " + w.config.string() + " --embedding stat --loss fle");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("fle loss requires") != std::string::npos);
}

TEST_CASE("predict prints one 'id score' line per wav, in range, repeatably") {
    const Workspace& w = ws();
    const std::string wav0 = (w.root / "data" / "synth0000.wav").string();
    const std::string wav1 = (w.root / "data" / "synth0001.wav").string();
    RunResult r1 = run("predict --checkpoint " + w.checkpoint.string() + " " + wav0 + " " + wav1);
    REQUIRE_MESSAGE(r1.exit_code == 0, r1.output);
    std::istringstream ss(r1.output);
    std::string line;
    std::size_t lines = 0;
    const std::regex fmt(R"(synth000[01] ([1-4]\.\d{3}))");
    while (std::getline(ss, line)) {
        std::smatch m;
        REQUIRE_MESSAGE(std::regex_match(line, m, fmt), line);
        const double v = std::stod(m[1]);
        CHECK(v >= 1.04);
        CHECK(v <= 4.64);
        ++lines;
    }
    CHECK(lines == 2);
    RunResult r2 = run("predict --checkpoint " + w.checkpoint.string() + " " + wav0 + " " + wav1);
    CHECK(r2.exit_code == 0);
    CHECK(r2.output == r1.output); // deterministic inference
}

TEST_CASE("predict --dump-json records block scores and attention") {
    const Workspace& w = ws();
    const fs::path dump = w.root / "dump.json";
    RunResult r = run("predict --checkpoint " + w.checkpoint.string() + " --dump-json " +
                      dump.string() + " " + (w.root / "data" / "synth0002.wav").string());
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    json j = json::parse(slurp(dump));
    REQUIRE(j.size() == 1);
    CHECK(j[0].at("id").get<std::string>() == "synth0002");
    const auto& scores = j[0].at("block_scores");
    const auto& att = j[0].at("attention");
    REQUIRE(scores.size() >= 1);
    REQUIRE(att.size() == scores.size());
    double sum = 0.0;
    for (const auto& a : att) sum += a.get<double>();
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9)); // attention is a simplex
}

TEST_CASE("predict f32 precision stays in range and close to f64") {
    const Workspace& w = ws();
    const std::string wav = (w.root / "data" / "synth0001.wav").string();
    RunResult r64 = run("predict --checkpoint " + w.checkpoint.string() + " " + wav);
    RunResult r32 =
        run("predict --checkpoint " + w.checkpoint.string() + " --precision f32 " + wav);
    REQUIRE(r64.exit_code == 0);
    REQUIRE(r32.exit_code == 0);
    const double v64 = std::stod(r64.output.substr(r64.output.find(' ')));
    const double v32 = std::stod(r32.output.substr(r32.output.find(' ')));
    CHECK(v32 >= 1.04);
    CHECK(v32 <= 4.64);
    CHECK(std::abs(v32 - v64) < 1e-2);
}

TEST_CASE("evaluate writes per-condition reports and a scatter file") {
    const Workspace& w = ws();
    const fs::path reports = w.root / "reports";
    RunResult r = run("evaluate --checkpoint " + w.checkpoint.string() + " --manifest " +
                      w.manifest.string() + " --reports " + reports.string() +
                      " --split train");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(reports / "report.txt"));
    CHECK(fs::exists(reports / "report.csv"));
    const std::string scatter = slurp(reports / "scatter.csv");
    std::size_t rows = std::count(scatter.begin(), scatter.end(), '\n');
    CHECK(rows == 5); // header + 4 train utterances
    CHECK(scatter.rfind("id,estimate,target\n", 0) == 0);
    CHECK(r.output.find("mae") != std::string::npos);
    CHECK(r.output.find("Total") != std::string::npos);
}

TEST_CASE("evaluate with an empty split selection exits 2") {
    const Workspace& w = ws();
    RunResult r = run("evaluate --checkpoint " + w.checkpoint.string() + " --manifest " +
                      w.manifest.string() + " --reports " + (w.root / "r2").string() +
                      " --split nosuch");
    CHECK(r.exit_code == 2);
}

TEST_CASE("simulate-eid writes a parseable sidecar with the requested statistics") {
    const Workspace& w = ws();
    const fs::path out = w.root / "erasures.txt";
    RunResult r = run("simulate-eid --frames 200 --fer 0 --out " + out.string());
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    const std::string text = slurp(out);
    std::istringstream ss(text);
    std::string header, bits;
    REQUIRE(std::getline(ss, header));
    REQUIRE(std::getline(ss, bits));
    CHECK(header.rfind("# kind=", 0) == 0);
    CHECK(bits == std::string(200, '0')); // fer 0 erases nothing

    RunResult rb = run("simulate-eid --frames 20000 --fer 0.1 --kind burst --mean-burst 3"
                       " --seed 5 --out " +
                       out.string());
    REQUIRE_MESSAGE(rb.exit_code == 0, rb.output);
    const std::string text2 = slurp(out);
    std::istringstream ss2(text2);
    REQUIRE(std::getline(ss2, header));
    REQUIRE(std::getline(ss2, bits));
    const double ones = std::count(bits.begin(), bits.end(), '1');
    CHECK(ones / 20000.0 == doctest::Approx(0.1).epsilon(0.15));
    CHECK(rb.output.find("empirical rate") != std::string::npos);
}

#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "metricforge/batching.hpp"
#include "metricforge/cli.hpp"
#include "metricforge/config.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/eval.hpp"
#include "oracles.hpp"

using namespace metricforge;

namespace {

std::map<std::string, std::string> parse_dump(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto [k, v] = split_setting(line);
    out[k] = v;
  }
  return out;
}

struct Captured {
  int code;
  std::string out;
};

// Runs the installed-style binary so printed output can be inspected.
Captured run_tool(const std::string& args) {
  const std::string cmd = std::string(METRICFORGE_TOOL_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults match the frozen table") {
    const auto d = parse_dump(dump_config(TrainConfig{}));
    const std::map<std::string, double> numbers{{"lambda_npair", 0.5}, {"lambda_soft", 0.1}, {"lambda_tri", 1.0},
                                                {"lambda_ang", 1.0},   {"alpha_deg", 45.0},  {"margin", 0.3},
                                                {"lr", 3e-4},          {"beta1", 0.9},       {"beta2", 0.999},
                                                {"eps", 1e-8},         {"p", 8},             {"k", 2},
                                                {"pretrain_epochs", 3}, {"epochs", 30},      {"seed", 1},
                                                {"se_reduction", 4},   {"embedding_dim", 128}};
    for (const auto& [key, value] : numbers) {
      INFO(key);
      REQUIRE(d.count(key) == 1);
      CHECK(std::stod(d.at(key)) == doctest::Approx(value).epsilon(1e-15));
    }
    CHECK(d.at("channels") == "16,32,64,128");
    CHECK(d.at("se_stages") == "1,2,3");
    CHECK(d.at("triplet_space") == "normalized");
    CHECK(d.at("angular_space") == "normalized");
    CHECK(d.at("npair_space") == "raw");
    CHECK(d.at("spectrum") == "magnitude");
    CHECK(d.at("norm") == "per-bin");
  }

  TEST_CASE("every key round-trips through a config file") {
    testutil::TempDir dir("config");
    TrainConfig cfg;
    apply_setting(cfg, "lambda_ang", "0");
    apply_setting(cfg, "channels", "8, 16");
    apply_setting(cfg, "blocks", "2,1");
    apply_setting(cfg, "se_stages", "0");
    apply_setting(cfg, "spectrum", "power");
    apply_setting(cfg, "log", "true");
    apply_setting(cfg, "npair_space", "normalized");
    apply_setting(cfg, "lr", "0.00123456789");
    std::ofstream(dir / "c.txt") << "# comment\n" << dump_config(cfg) << "\n";
    TrainConfig back;
    load_config_file(dir / "c.txt", back);
    CHECK(dump_config(back) == dump_config(cfg));
    CHECK(back.adam.lr == 0.00123456789);
    CHECK(back.model.channels == std::vector<std::size_t>{8, 16});
    CHECK(back.features.log_compress);
    CHECK(parse_dump(dump_config(back)).size() == config_keys().size());
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    TrainConfig cfg;
    CHECK_THROWS_AS(apply_setting(cfg, "lambda_foo", "1"), ContractError);
    CHECK_THROWS_AS(apply_setting(cfg, "lr", "fast"), ContractError);
    CHECK_THROWS_AS(apply_setting(cfg, "p", "-3"), ContractError);
    CHECK_THROWS_AS(apply_setting(cfg, "triplet_space", "curved"), ContractError);
    CHECK_THROWS_AS(split_setting("novalue"), ContractError);
    testutil::TempDir dir("configbad");
    std::ofstream(dir / "c.txt") << "lr = 0.1\nbogus = 2\n";
    try {
      load_config_file(dir / "c.txt", cfg);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }
}

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 1, help exits 0") {
    CHECK(cli::run({}) == cli::kUsage);
    CHECK(cli::run({"frobnicate"}) == cli::kUsage);
    CHECK(cli::run({"train", "--epochs", "many"}) == cli::kUsage);
    CHECK(cli::run({"--help"}) == cli::kOk);
    CHECK(cli::run({"train", "--set", "nonsense_key=1", "--dump-config"}) == cli::kUsage);
    CHECK(cli::run({"train", "--set", "epochs=3", "--epochs", "4", "--dump-config"}) == cli::kUsage);
    CHECK(cli::run({"train", "--lambda-tri", "-1", "--dump-config"}) == cli::kUsage);
    CHECK(cli::run({"train", "--lambda-tri", "0", "--lambda-npair", "0", "--lambda-ang", "0", "--lambda-soft", "0",
                    "--dump-config"}) == cli::kUsage);
    CHECK(cli::run({"eval", "--metric", "manhattan", "--score-file", "x.csv"}) == cli::kUsage);
  }

  TEST_CASE("flag defaults and precedence") {
    const Captured d = run_tool("train --dump-config");
    CHECK(d.code == 0);
    const auto table = parse_dump(d.out);
    CHECK(std::stod(table.at("lambda_tri")) == 1.0);
    CHECK(std::stod(table.at("alpha_deg")) == 45.0);

    testutil::TempDir dir("clicfg");
    std::ofstream(dir / "c.txt") << "epochs = 7\nmargin = 0.5\nseed = 4\n";
    const Captured o = run_tool("train --config " + (dir / "c.txt").string() + " --set margin=0.6 --seed 9 --dump-config");
    CHECK(o.code == 0);
    const auto t2 = parse_dump(o.out);
    CHECK(t2.at("epochs") == "7");
    CHECK(std::stod(t2.at("margin")) == 0.6);
    CHECK(t2.at("seed") == "9");
  }

  TEST_CASE("synth writes the requested corpus into a fresh directory") {
    testutil::TempDir dir("clisynth");
    const auto out = dir / "nested/corpus";
    REQUIRE(cli::run({"synth", "--speakers", "20", "--utts", "20", "--seed", "7", "--duration", "0.05", "--heldout", "2",
                      "--targets", "10", "--nontargets", "10", "--out", out.string()}) == cli::kOk);
    CHECK(read_manifest(out / "train.tsv").size() == 400);
    CHECK(read_trials(out / "trials.txt").size() == 20);
    const auto again = dir / "again";
    REQUIRE(cli::run({"synth", "--speakers", "20", "--utts", "20", "--seed", "7", "--duration", "0.05", "--heldout", "2",
                      "--targets", "10", "--nontargets", "10", "--out", again.string()}) == cli::kOk);
    CHECK(testutil::tree_bytes(out) == testutil::tree_bytes(again));
  }

  TEST_CASE("eval passthrough of a perfect score file") {
    testutil::TempDir dir("clieval");
    std::ofstream(dir / "s.csv") << "label,path_a,path_b,score\n1,a,b,0.9\n1,c,d,0.8\n0,a,c,0.1\n0,b,d,0.2\n";
    const Captured r = run_tool("eval --score-file " + (dir / "s.csv").string() + " --out " + (dir / "out").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("EER=0.0000%") != std::string::npos);
    for (const char* f : {"scores.csv", "eer.json", "det.csv", "det.svg"}) CHECK(std::filesystem::exists(dir / "out" / f));
    const std::string svg = testutil::read_file(dir / "out/det.svg");
    CHECK(svg.find("False acceptance rate (%)") != std::string::npos);
    CHECK(svg.find("False rejection rate (%)") != std::string::npos);
  }

  TEST_CASE("missing inputs exit with the data code") {
    testutil::TempDir dir("climissing");
    CHECK(cli::run({"eval", "--score-file", (dir / "none.csv").string(), "--out", (dir / "o").string()}) == cli::kData);
    CHECK(cli::run({"eval", "--checkpoint", (dir / "none").string(), "--trials", (dir / "t.txt").string()}) == cli::kData);
    CHECK(cli::run({"train", "--manifest", (dir / "none.tsv").string(), "--out", (dir / "run").string()}) == cli::kData);
    CHECK(cli::run({"eval", "--score-file", "x.csv", "--trials", "t.txt"}) == cli::kUsage);
  }

  TEST_CASE("zero-epoch training stores the initialization and retraining is byte-identical") {
    testutil::TempDir dir("clitrain");
    REQUIRE(cli::run({"synth", "--speakers", "3", "--utts", "3", "--heldout", "2", "--duration", "3.1", "--targets", "2",
                      "--nontargets", "2", "--out", (dir / "c").string()}) == cli::kOk);
    const std::vector<std::string> common{"--manifest", (dir / "c/train.tsv").string(), "--p", "2", "--set",
                                          "channels=4,8", "--set", "blocks=1,1", "--set", "se_stages=1", "--set",
                                          "se_reduction=2", "--set", "embedding_dim=8", "--quiet"};
    auto args = std::vector<std::string>{"train", "--epochs", "0", "--pretrain-epochs", "0", "--out", (dir / "r0").string()};
    args.insert(args.end(), common.begin(), common.end());
    REQUIRE(cli::run(args) == cli::kOk);
    BackboneConfig model;
    model.channels = {4, 8};
    model.blocks = {1, 1};
    model.se_stages = {1};
    model.se_reduction = 2;
    model.embedding_dim = 8;
    model.num_classes = 3;
    CHECK(load_checkpoint(dir / "r0/model").params == init_params(model, 1));

    for (const char* run : {"r1", "r2"}) {
      args = {"train", "--epochs", "1", "--pretrain-epochs", "1", "--out", (dir / run).string()};
      args.insert(args.end(), common.begin(), common.end());
      REQUIRE(cli::run(args) == cli::kOk);
      REQUIRE(cli::run({"eval", "--checkpoint", (dir / run / "model").string(), "--trials", (dir / "c/trials.txt").string(),
                        "--out", (dir / run / "eval").string()}) == cli::kOk);
    }
    CHECK(testutil::read_file(dir / "r1/metrics.csv") == testutil::read_file(dir / "r2/metrics.csv"));
    CHECK(testutil::read_file(dir / "r1/eval/scores.csv") == testutil::read_file(dir / "r2/eval/scores.csv"));
  }
}

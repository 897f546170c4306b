#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "rdarts/trainer.hpp"

using namespace rdarts;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "rdarts_cli";

// Small enough for a couple of seconds per command.
const std::string kData =
    " --synthetic --subjects 4 --record-length 256 --window 32 --stride 32";
const std::string kSearch = kData + " --init-channels 4 --train-batch 8 --val-batch 8";

// Per-test capture files so ctest may run the cases in parallel.
fs::path capture(const char* stream) {
  return kRoot / (std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "." + stream);
}

int run(const std::string& args) {
  fs::create_directories(kRoot);
  const std::string cmd =
      std::string(RDARTS_BIN) + " -q " + args + " > " + capture("out").string() + " 2> " + capture("err").string();
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path dir(const std::string& name) {
  const auto p = kRoot / name;
  fs::remove_all(p);
  return p;
}

std::size_t data_rows(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::size_t n = 0;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST(Cli, MissingDataSourceIsAUsageError) {
  EXPECT_EQ(run("search --epochs 1"), 2);
  EXPECT_NE(slurp(capture("err")).find("--data or --synthetic"), std::string::npos);
  EXPECT_EQ(run("search --data x.csv --synthetic"), 2);
  EXPECT_EQ(run("search --synthetic --tier bogus"), 2);
  EXPECT_EQ(run(""), 2);
}

TEST(Cli, MissingOrBadDataFileIsADataError) {
  EXPECT_EQ(run("search --data " + (kRoot / "nope.csv").string()), 3);
  const auto bad = kRoot / "bad.csv";  // no session column
  std::ofstream(bad) << "subject,value\ns1,1\n";
  EXPECT_EQ(run("search --data " + bad.string()), 3);
  EXPECT_NE(slurp(capture("err")).find("session"), std::string::npos);
}

TEST(Cli, SearchIsByteDeterministic) {
  const auto a = dir("det_a"), b = dir("det_b");
  ASSERT_EQ(run("search --tier relax --epochs 2 --seed 7 --out " + a.string() + kSearch), 0);
  ASSERT_EQ(run("search --tier relax --epochs 2 --seed 7 --out " + b.string() + kSearch), 0);
  EXPECT_EQ(slurp(a / "genotype.json"), slurp(b / "genotype.json"));
  EXPECT_FALSE(slurp(a / "genotype.json").empty());
  for (const auto* f : {"run_manifest.json", "config.json", "log.csv", "genotype.dot", "dataset.json"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  const auto m = nlohmann::json::parse(slurp(a / "run_manifest.json"));
  EXPECT_EQ(m["command"], "search");
  EXPECT_EQ(m["seed"], 7);
  EXPECT_TRUE(m["input_hashes"].contains("windows"));
}

TEST(Cli, DartsTierSharesNormalCells) {
  const auto d = dir("darts");
  ASSERT_EQ(run("search --tier darts --epochs 1 --out " + d.string() + kSearch), 0);
  const auto g = genotype_from_json(nlohmann::json::parse(slurp(d / "genotype.json")));
  ASSERT_EQ(g.cells.size(), 6u);
  EXPECT_EQ(g.cells[0].nodes, g.cells[2].nodes);
  EXPECT_EQ(g.cells[0].nodes, g.cells[4].nodes);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const auto d = dir("config");
  fs::create_directories(kRoot);
  const auto ini = kRoot / "search.toml";
  std::ofstream(ini) << "[search]\nepochs = 2\nseed = 11\n";
  ASSERT_EQ(run("--config " + ini.string() + " search --seed 12 --out " + d.string() + kSearch), 0);
  const auto c = nlohmann::json::parse(slurp(d / "config.json"));
  EXPECT_EQ(c["search"]["epochs"], 2);
  EXPECT_EQ(c["search"]["seed"], 12);
}

TEST(Cli, TrainAndEvaluate) {
  const auto s = dir("pipe_search"), t0 = dir("pipe_t0"), t = dir("pipe_train"), e = dir("pipe_eval"),
             e2 = dir("pipe_eval2");
  ASSERT_EQ(run("search --epochs 1 --out " + s.string() + kSearch), 0);
  const auto geno = (s / "genotype.json").string();

  // Zero epochs: the checkpoint is the seeded initialization.
  ASSERT_EQ(run("train --epochs 0 --seed 3 --genotype " + geno + " --out " + t0.string() + kData), 0);
  auto w0 = load_weights<float>(t0 / "weights.ckpt");
  auto init = instantiate_discrete<float>(w0.net.genotype(), w0.net.config(), 3);
  EXPECT_EQ(snapshot_values(w0.net.parameters()), snapshot_values(init.parameters()));
  EXPECT_EQ(data_rows(t0 / "log.csv"), 0u);

  ASSERT_EQ(run("train --epochs 3 --batch 8 --genotype " + geno + " --out " + t.string() + kData), 0);
  EXPECT_EQ(data_rows(t / "log.csv"), 3u);
  EXPECT_TRUE(fs::exists(t / "run_manifest.json"));

  ASSERT_EQ(run("eval --weights " + (t / "weights.ckpt").string() + " --out " + e.string() + kData), 0);
  ASSERT_EQ(run("eval --weights " + (t / "weights.ckpt").string() + " --out " + e2.string() + kData), 0);
  const auto metrics = slurp(e / "metrics.json");
  EXPECT_EQ(metrics, slurp(e2 / "metrics.json"));
  const auto m = nlohmann::json::parse(metrics);
  for (const auto* k : {"eer", "frr_at_far", "n_genuine", "n_impostor", "under_resolved"}) EXPECT_TRUE(m.contains(k)) << k;
  EXPECT_EQ(m["n_genuine"], 4 * 8);
  EXPECT_EQ(m["n_impostor"], 4 * 3 * 8);
  EXPECT_EQ(slurp(e / "det.csv").substr(0, 16), "threshold,far,fr");
  EXPECT_EQ(nlohmann::json::parse(slurp(capture("out"))), m);

  // Channel count mismatch between weights and data.
  EXPECT_EQ(run("eval --weights " + (t / "weights.ckpt").string() + " --out " + e2.string() + kData + " --channels 3"), 3);
}

TEST(Cli, InvalidGenotypeIsAStructuredError) {
  const auto d = dir("badgeno");
  fs::create_directories(d);
  const auto g = d / "genotype.json";
  std::ofstream(g) << R"({"cells": [{"kind": "normal", "nodes": []}], "vocab": []})";
  EXPECT_EQ(run("train --epochs 1 --genotype " + g.string() + " --out " + (d / "t").string() + kData), 3);
  EXPECT_NE(slurp(capture("err")).find("error: "), std::string::npos);
  std::ofstream(g) << "{not json";
  EXPECT_EQ(run("train --epochs 1 --genotype " + g.string() + " --out " + (d / "t").string() + kData), 3);
  EXPECT_EQ(run("train --epochs 1 --genotype " + (d / "missing.json").string() + kData), 3);
}

TEST(Cli, NumericalFailureExitCode) {
  const auto d = dir("nan");
  EXPECT_EQ(run("search --epochs 2 --no-such-flag 1" + kSearch), 2);
  ASSERT_EQ(run("search --epochs 1 --out " + d.string() + kSearch), 0);
  EXPECT_EQ(run("train --epochs 2 --lr 1e30 --batch 8 --genotype " + (d / "genotype.json").string() + " --out " +
                (d / "t").string() + kData),
            4);
}

TEST(Cli, AblationReportHasThreeRows) {
  const auto a = dir("ablate_a"), b = dir("ablate_b");
  const std::string args = " --seeds 0 --search-epochs 1 --train-epochs 1 --init-channels 4" + kData;
  ASSERT_EQ(run("ablate --out " + a.string() + args), 0);
  ASSERT_EQ(run("ablate --out " + b.string() + args), 0);
  const auto md = slurp(a / "ablation.md");
  EXPECT_EQ(md, slurp(b / "ablation.md"));
  EXPECT_NE(md.find("| DARTS |"), std::string::npos);
  EXPECT_NE(md.find("| +alpha |"), std::string::npos);
  EXPECT_NE(md.find("| +beta (Relax DARTS) |"), std::string::npos);
  const auto r = nlohmann::json::parse(slurp(a / "ablation.json"));
  ASSERT_EQ(r["rows"].size(), 3u);
  std::set<std::string> splits;
  for (const auto& run : r["runs"]) splits.insert(run["split_sha256"].get<std::string>());
  EXPECT_EQ(splits.size(), 1u);
}

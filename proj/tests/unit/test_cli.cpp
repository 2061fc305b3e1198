/*
 * Copyright 2026 The QuMAB Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qumab/cli.hpp"
#include "qumab/focus.hpp"
#include "qumab/synthetic.hpp"

namespace {

using namespace qumab;
using nlohmann::json;
namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class CliTest : public ::testing::Test {
 protected:
  fs::path root;

  void SetUp() override {
    root = fs::temp_directory_path() / "qumab_cli_test" /
           ::testing::UnitTest::GetInstance()->current_test_info()->name();
    fs::remove_all(root);
    fs::create_directories(root);
  }

  // A world small enough to train in well under a second.
  fs::path write_config(json extra = json::object()) {
    json doc{{"data",
              {{"world",
                {{"n_samples", 60}, {"n_patches", 16}, {"feature_dim", 8}, {"n_annotators", 3},
                 {"n_classes", 2}, {"mask_size", 4}, {"seed", 3}}}}},
             {"model", {{"hidden_dim", 8}, {"n_heads", 2}, {"n_blocks", 1}, {"classifier_hidden", 4}}},
             {"train", {{"max_epochs", 2}, {"patience", 1}, {"batch_size", 16}, {"peak_lr", 1e-3}}}};
    doc.merge_patch(extra);
    auto path = root / "config.json";
    std::ofstream(path) << doc.dump(2);
    return path;
  }
};

TEST_F(CliTest, SynthIsByteDeterministic) {
  auto cfg = write_config().string();
  ASSERT_EQ(run({"synth", "-c", cfg, "-o", (root / "a").string()}).code, 0);
  ASSERT_EQ(run({"synth", "-c", cfg, "-o", (root / "b").string()}).code, 0);
  for (const char* f : {"features.qmfs", "annotations.csv", "clean_annotations.csv", "masks.json", "world.json"}) {
    EXPECT_FALSE(slurp(root / "a" / f).empty()) << f;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  // The masks file matches the in-process generator for the echoed spec.
  auto spec = read_json(root / "a" / "world.json").get<data::WorldSpec>();
  auto world = data::gen_synthetic_world(spec);
  EXPECT_EQ(read_json(root / "a" / "masks.json"), data::masks_to_json(world));
}

TEST_F(CliTest, TrainIsDeterministic) {
  auto cfg = write_config().string();
  ASSERT_EQ(run({"train", "-c", cfg, "-o", (root / "a").string()}).code, 0);
  ASSERT_EQ(run({"train", "-c", cfg, "-o", (root / "b").string()}).code, 0);
  EXPECT_EQ(slurp(root / "a" / "history.json"), slurp(root / "b" / "history.json"));
  EXPECT_EQ(slurp(root / "a" / "checkpoint" / "checkpoint.bin"),
            slurp(root / "b" / "checkpoint" / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(root / "a" / "config.echo.json"));
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  json files{{"data", {{"features", (root / "missing.qmfs").string()},
                       {"annotations", (root / "missing.csv").string()}}}};
  auto missing = run({"train", "-c", write_config().string(), "-o", (root / "x").string(), "--set",
                      "data=" + files["data"].dump()});
  EXPECT_EQ(missing.code, cli::kExitUsage);
  EXPECT_NE(missing.err.find("missing.qmfs"), std::string::npos) << missing.err;

  auto unknown = run({"train", "-c", write_config().string(), "--set", "train.learning_rate=0.1"});
  EXPECT_EQ(unknown.code, cli::kExitUsage);
  EXPECT_NE(unknown.err.find("learning_rate"), std::string::npos) << unknown.err;

  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"viz", "-c", write_config().string()}).code, cli::kExitUsage);  // no checkpoint
}

TEST_F(CliTest, OracleStubScoresPerfectly) {
  auto cfg = write_config().string();
  const auto dir = root / "eval";
  ASSERT_EQ(run({"eval", "-c", cfg, "-o", dir.string(), "--oracle-stub"}).code, 0);
  auto report = read_json(dir / "report.json");
  EXPECT_DOUBLE_EQ(report["avg"]["accuracy"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(report["avg"]["f1"].get<double>(), 1.0);
  for (const auto& a : report["annotators"]) EXPECT_DOUBLE_EQ(a["accuracy"].get<double>(), 1.0);
  ASSERT_FALSE(report["copr"].is_null());
  EXPECT_DOUBLE_EQ(report["copr"]["accuracy"].get<double>(), 1.0);

  // Every number in the table is the JSON value at 4 decimals.
  const auto table = slurp(dir / "table.txt");
  EXPECT_NE(table.find("A1"), std::string::npos);
  EXPECT_NE(table.find("CoPr"), std::string::npos);
  EXPECT_EQ(table.find("0.9"), std::string::npos);
  EXPECT_NE(table.find("1.0000"), std::string::npos);
}

TEST_F(CliTest, EvalMatchesTrainedCheckpoint) {
  auto cfg = write_config().string();
  ASSERT_EQ(run({"train", "-c", cfg, "-o", (root / "t").string()}).code, 0);
  auto ok = run({"eval", "-c", cfg, "-o", (root / "e").string(), "--checkpoint",
                 (root / "t" / "checkpoint").string()});
  ASSERT_EQ(ok.code, 0) << ok.err;
  auto report = read_json(root / "e" / "report.json");
  const auto table = slurp(root / "e" / "table.txt");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", report["avg"]["accuracy"].get<double>());
  EXPECT_NE(table.find(buf), std::string::npos) << table;

  // A checkpoint for a different annotator count is refused.
  auto other = write_config({{"data", {{"world", {{"n_annotators", 4}}}}}}).string();
  auto bad = run({"eval", "-c", other, "-o", (root / "e2").string(), "--checkpoint",
                  (root / "t" / "checkpoint").string()});
  EXPECT_EQ(bad.code, cli::kExitUsage);
}

TEST_F(CliTest, SweepResumesAndDropsRecompute) {
  auto cfg = write_config().string();
  const auto dir = root / "sweep";
  std::vector<std::string> args{"sweep", "-c", cfg, "-o", dir.string(), "--rates", "0,0.5",
                                "--seeds", "0,1", "--variants", "full"};
  auto first = run(args);
  ASSERT_EQ(first.code, 0) << first.err;
  const auto sweep1 = slurp(dir / "sweep.json");
  auto second = run(args);
  ASSERT_EQ(second.code, 0);
  EXPECT_EQ(second.err.find("finished"), std::string::npos) << second.err;
  EXPECT_NE(second.err.find("resumed"), std::string::npos);
  EXPECT_EQ(slurp(dir / "sweep.json"), sweep1);

  auto s = json::parse(sweep1);
  std::map<std::pair<double, std::uint64_t>, double> acc;
  for (const auto& c : s["cells"]) {
    acc[{c["rate"].get<double>(), c["seed"].get<std::uint64_t>()}] = c["report"]["avg"]["accuracy"].get<double>();
  }
  ASSERT_EQ(acc.size(), 4u);
  for (const auto& row : s["rows"]) {
    const double rate = row["rate"].get<double>();
    double drop = 0;
    for (std::uint64_t seed : {0u, 1u}) drop += (acc[{0.0, seed}] - acc[{rate, seed}]) / acc[{0.0, seed}];
    EXPECT_NEAR(row["mean_relative_drop"].get<double>(), drop / 2, 1e-12);
  }
}

TEST_F(CliTest, VizWritesOneHeatmapPerAnnotator) {
  auto cfg = write_config().string();
  ASSERT_EQ(run({"train", "-c", cfg, "-o", (root / "t").string()}).code, 0);
  const auto dir = root / "viz";
  auto r = run({"viz", "-c", cfg, "-o", dir.string(), "--checkpoint", (root / "t" / "checkpoint").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto summary = read_json(dir / "focus_summary.json");
  ASSERT_EQ(summary["annotators"].size(), 3u);
  auto world = data::gen_synthetic_world(read_json(root / "t" / "config.echo.json")["data"]["world"]
                                             .get<data::WorldSpec>());
  double mean = 0;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto& e = summary["annotators"][a];
    const auto pgm = dir / "focus" / e["heatmap"].get<std::string>();
    auto h = viz::read_pgm(pgm.string());
    EXPECT_EQ(h.rows * h.cols, 16u);
    auto map = viz::load_sidecar(viz::sidecar_path(pgm.string()));
    double total = 0;
    for (double w : map.weights) total += w;
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_DOUBLE_EQ(e["recovery_score"].get<double>(), viz::focus_recovery_score(map, world.masks[a]));
    mean += e["recovery_score"].get<double>() / 3;
  }
  EXPECT_NEAR(summary["mean_recovery_score"].get<double>(), mean, 1e-12);

  auto one = run({"viz", "-c", cfg, "-o", (root / "viz1").string(), "--checkpoint",
                  (root / "t" / "checkpoint").string(), "--annotators", "nobody"});
  EXPECT_EQ(one.code, cli::kExitUsage);
}

}  // namespace

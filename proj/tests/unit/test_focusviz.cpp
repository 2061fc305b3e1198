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
#include <numeric>
#include <random>

#include "qumab/errors.hpp"
#include "qumab/focus.hpp"
#include "qumab/synthetic.hpp"

namespace {

using namespace qumab;
using viz::FocusMap;
using viz::FocusMode;

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "qumab_focus_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// One sample, 2 heads, 2 queries, 4 keys, 2 blocks; every row is given.
model::AttentionRecord hand_record() {
  model::AttentionRecord r;
  r.batch = 1;
  r.heads = 2;
  r.n_queries = 2;
  r.n_keys = 4;
  // Layout per block: [head][query][key].
  r.cross.push_back({0.1, 0.2, 0.3, 0.4,  /**/ 0.25, 0.25, 0.25, 0.25,  // head 0
                     0.7, 0.1, 0.1, 0.1,  /**/ 0.0, 0.0, 0.5, 0.5});    // head 1
  r.cross.push_back({0.4, 0.3, 0.2, 0.1,  /**/ 1.0, 0.0, 0.0, 0.0,
                     0.2, 0.2, 0.3, 0.3,  /**/ 0.0, 1.0, 0.0, 0.0});
  return r;
}

void expect_weights(const FocusMap& m, std::vector<double> want) {
  ASSERT_EQ(m.weights.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(m.weights[i], want[i], 1e-12) << i;
}

TEST(ExtractFocus, HandAveragedRecord) {
  auto r = hand_record();
  // Query 0: mean of (.1 .2 .3 .4), (.7 .1 .1 .1), (.4 .3 .2 .1), (.2 .2 .3 .3).
  expect_weights(viz::extract_focus(r, 0, FocusMode::patches), {0.35, 0.2, 0.225, 0.225});
  // Query 1: mean of (.25 x4), (0 0 .5 .5), (1 0 0 0), (0 1 0 0).
  expect_weights(viz::extract_focus(r, 1, FocusMode::patches), {0.3125, 0.3125, 0.1875, 0.1875});
  auto per_head = viz::extract_focus_per_head(r, 1, FocusMode::patches);
  ASSERT_EQ(per_head.size(), 4u);
  expect_weights(per_head[2], {1, 0, 0, 0});
  EXPECT_THROW(viz::extract_focus(r, 2, FocusMode::patches), IndexError);
}

TEST(ExtractFocus, FramesSumCompressedKeys) {
  auto r = hand_record();
  r.n_frames = 2;
  r.keys_per_frame = 2;
  expect_weights(viz::extract_focus(r, 0, FocusMode::frames), {0.55, 0.45});
  expect_weights(viz::extract_focus(r, 1, FocusMode::frames), {0.625, 0.375});
}

TEST(ExtractFocus, UniformAndSingleKey) {
  model::AttentionRecord r;
  r.batch = 2;
  r.heads = 3;
  r.n_queries = 1;
  r.n_keys = 5;
  r.cross.assign(2, std::vector<double>(2 * 3 * 5, 0.2));
  expect_weights(viz::extract_focus(r, 0, FocusMode::patches), {0.2, 0.2, 0.2, 0.2, 0.2});
  r.n_keys = 1;
  r.cross.assign(1, std::vector<double>(6, 1.0));
  expect_weights(viz::extract_focus(r, 0, FocusMode::patches, 1), {1.0});
  EXPECT_THROW(viz::extract_focus(model::AttentionRecord{}, 0, FocusMode::patches), ContractError);
}

TEST(ExtractFocus, TrainedShapeModelSumsToOne) {
  model::ModelConfig c;
  c.n_annotators = 3;
  c.n_classes = 2;
  c.feature_dim = 4;
  c.hidden_dim = 8;
  c.n_heads = 2;
  auto p = model::init_model<float>(c, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n;
  std::vector<float> x(2 * 9 * 4);
  for (auto& v : x) v = n(rng);
  model::AttentionRecord rec;
  nk::Tape<float> tape(false);
  model::forward_image(tape, nk::Tensor<float>({2, 9, 4}, x), p, c, &rec);
  for (std::size_t a = 0; a < 3; ++a) {
    auto m = viz::extract_focus(rec, a, FocusMode::patches);
    EXPECT_NEAR(std::accumulate(m.weights.begin(), m.weights.end(), 0.0), 1.0, 1e-5);
    for (double w : m.weights) EXPECT_GE(w, 0.0);
  }
}

TEST(RecoveryScore, Examples) {
  FocusMap uniform{"a", std::vector<double>(8, 0.125), {}};
  EXPECT_DOUBLE_EQ(viz::focus_recovery_score(uniform, {0, 5}), 1.0);
  FocusMap inside{"a", {0.5, 0.5, 0, 0, 0, 0, 0, 0}, {}};
  EXPECT_DOUBLE_EQ(viz::focus_recovery_score(inside, {0, 1}), 4.0);
  EXPECT_THROW(viz::focus_recovery_score(inside, {}), ContractError);
  EXPECT_THROW(viz::focus_recovery_score(inside, {1, 1}), ContractError);
  EXPECT_THROW(viz::focus_recovery_score(inside, {8}), IndexError);
}

TEST(RecoveryScore, IdempotentUnderRenormalization) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 100; ++rep) {
    FocusMap m{"a", std::vector<double>(16), {}};
    for (auto& w : m.weights) w = u(rng);
    m = viz::renormalized(m);
    const std::vector<std::size_t> mask{1, 4, 9};
    EXPECT_NEAR(viz::focus_recovery_score(viz::renormalized(m), mask), viz::focus_recovery_score(m, mask), 1e-12);
  }
  EXPECT_THROW(viz::renormalized(FocusMap{"a", {0, 0}, {}}), ContractError);
}

TEST(Heatmap, SingleHotAndUniform) {
  const auto path = scratch("hot.pgm").string();
  viz::export_heatmap(FocusMap{"A_1", {0, 0, 1, 0, 0, 0}, {}}, {2, 3}, path);
  auto h = viz::read_pgm(path);
  EXPECT_EQ(h.rows, 2u);
  EXPECT_EQ(h.cols, 3u);
  EXPECT_EQ(h.pixels, (std::vector<std::uint8_t>{0, 0, 255, 0, 0, 0}));
  std::ifstream in(path, std::ios::binary);
  std::string bytes{std::istreambuf_iterator<char>(in), {}};
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 6u);

  viz::export_heatmap(FocusMap{"A_2", std::vector<double>(4, 0.25), {}}, {1, 4}, path);
  EXPECT_EQ(viz::read_pgm(path).pixels, std::vector<std::uint8_t>(4, 255));
  EXPECT_THROW(viz::export_heatmap(FocusMap{"A_2", std::vector<double>(4, 0.25), {}}, {2, 3}, path),
               ConfigError);
}

TEST(Heatmap, SidecarRoundTripIsExact) {
  const auto path = scratch("side.pgm").string();
  EXPECT_EQ(viz::sidecar_path(path), scratch("side.json").string());
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  FocusMap m{"rater 7", std::vector<double>(12), {{"blocks", "mean"}}};
  for (auto& w : m.weights) w = u(rng);
  m = viz::renormalized(m);
  viz::export_heatmap(m, {3, 4}, path);
  auto back = viz::load_sidecar(viz::sidecar_path(path));
  EXPECT_EQ(back.annotator_id, m.annotator_id);
  EXPECT_EQ(back.weights, m.weights);  // bit-exact
  EXPECT_EQ(back.provenance, m.provenance);
}

TEST(Heatmap, ExportIsByteStable) {
  FocusMap m{"a", {0.1, 0.2, 0.3, 0.4}, {}};
  const auto a = scratch("s1.pgm").string(), b = scratch("s2.pgm").string();
  viz::export_heatmap(m, {2, 2}, a);
  viz::export_heatmap(m, {2, 2}, b);
  auto read = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string{std::istreambuf_iterator<char>(in), {}};
  };
  EXPECT_EQ(read(a), read(b));
  EXPECT_EQ(viz::read_pgm(a).pixels, (std::vector<std::uint8_t>{64, 128, 191, 255}));
}

TEST(DatasetFocus, BaseVariantHasNoFocus) {
  model::ModelConfig c;
  c.n_annotators = 2;
  c.feature_dim = 4;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.variant = model::Variant::base;
  train::LabeledData d;
  d.features = nk::Tensor<float>::zeros({1, 3, 4});
  d.sample_ids = {"s"};
  d.labels = {0, 1};
  d.n_annotators = 2;
  d.n_classes = 2;
  EXPECT_THROW(viz::dataset_focus(model::init_model<float>(c, 0), c, d, {"a", "b"}), ContractError);
  c.variant = model::Variant::full;
  auto maps = viz::dataset_focus(model::init_model<float>(c, 0), c, d, {"a", "b"});
  ASSERT_EQ(maps.size(), 2u);
  EXPECT_EQ(maps[1].annotator_id, "b");
  EXPECT_EQ(maps[0].weights.size(), 3u);
}

}  // namespace

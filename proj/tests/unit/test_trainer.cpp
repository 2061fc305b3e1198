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

#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "qumab/errors.hpp"
#include "qumab/synthetic.hpp"
#include "qumab/trainer.hpp"

namespace {

using namespace qumab;
using train::TrainConfig;

model::ModelConfig tiny_model(std::size_t annotators, std::size_t classes, std::size_t feature_dim) {
  model::ModelConfig c;
  c.n_annotators = annotators;
  c.n_classes = classes;
  c.feature_dim = feature_dim;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.n_blocks = 1;
  c.classifier_hidden = 8;
  return c;
}

data::WorldSpec tiny_world() {
  data::WorldSpec s;
  s.n_samples = 80;
  s.n_patches = 4;
  s.feature_dim = 8;
  s.n_annotators = 3;
  s.n_classes = 2;
  s.mask_size = 2;
  s.noise_level = 0.0;
  s.seed = 3;
  return s;
}

// Independent restatement of the schedule.
double schedule(std::size_t step, std::size_t total, double peak, double frac) {
  const auto warm = static_cast<std::size_t>(std::floor(frac * static_cast<double>(total)));
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TEST(LrSchedule, Examples) {
  TrainConfig cfg;
  cfg.peak_lr = 1e-4;
  EXPECT_EQ(train::lr_at(0, 100, cfg), 0.0);
  EXPECT_EQ(train::lr_at(20, 100, cfg), 1e-4);
  EXPECT_EQ(train::lr_at(100, 100, cfg), 0.0);
  EXPECT_THROW(train::lr_at(101, 100, cfg), ContractError);
}

TEST(LrSchedule, MatchesClosedFormAtEveryStep) {
  for (std::size_t total : {1u, 7u, 100u, 1234u}) {
    for (double frac : {0.05, 0.2, 0.5}) {
      TrainConfig cfg;
      cfg.peak_lr = 3e-3;
      cfg.warmup_fraction = frac;
      for (std::size_t s = 0; s <= total; ++s) {
        EXPECT_EQ(train::lr_at(s, total, cfg), schedule(s, total, 3e-3, frac))
            << "total " << total << " frac " << frac << " step " << s;
      }
    }
  }
}

// One-parameter-per-tensor fixture: every tensor of a real model set to a
// constant with a constant gradient.
model::ModelParams<float> filled_model(float value, float grad) {
  auto p = model::init_model<float>(tiny_model(2, 2, 4), 0);
  for (auto& n : p.named()) {
    std::fill(n.tensor.mutable_data().begin(), n.tensor.mutable_data().end(), value);
    auto g = n.tensor.mutable_grad();
    std::fill(g.begin(), g.end(), grad);
  }
  return p;
}

TEST(Clip, ThreeFourFive) {
  auto p = model::init_model<double>(tiny_model(2, 2, 4), 0);
  auto named = p.named();
  named[0].tensor.mutable_grad()[0] = 3;
  named[1].tensor.mutable_grad()[0] = 4;
  EXPECT_DOUBLE_EQ(train::global_grad_norm(p), 5.0);
  EXPECT_DOUBLE_EQ(train::clip_gradients(p, 1.0), 0.2);
  EXPECT_NEAR(named[0].tensor.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(named[1].tensor.grad()[0], 0.8, 1e-15);

  named[0].tensor.mutable_grad()[0] = 0.3;
  named[1].tensor.mutable_grad()[0] = 0.4;
  EXPECT_EQ(train::clip_gradients(p, 1.0), 1.0);
  EXPECT_EQ(named[0].tensor.grad()[0], 0.3);
}

TEST(Clip, RandomGradientsEndBelowMaxNorm) {
  std::mt19937_64 rng(1);
  std::lognormal_distribution<double> mag(0.0, 3.0);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 50; ++rep) {
    auto p = model::init_model<float>(tiny_model(3, 3, 5), rep);
    const double scale = mag(rng);
    for (auto& t : p.named())
      for (auto& g : t.tensor.mutable_grad()) g = static_cast<float>(n(rng) * scale);
    train::clip_gradients(p, 1.0);
    EXPECT_LE(train::global_grad_norm(p), 1.0 + 1e-7);
  }
}

TEST(Clip, NoGradientsIsContractError) {
  auto p = model::init_model<float>(tiny_model(2, 2, 4), 0);
  EXPECT_THROW(train::clip_gradients(p, 1.0), ContractError);
}

TEST(AdamW, HandComputedFirstStep) {
  auto p = filled_model(1.0f, 1.0f);
  train::AdamW<float> opt(p);
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  opt.step(p, 0.1, cfg);
  for (const auto& n : p.named()) {
    // Decay only on weight matrices: 1 - 0.1/(1+1e-8) - 0.1*0.01 = 0.899.
    const double want = n.decays() ? 0.899 : 1.0 - 0.1 / (1.0 + 1e-8);
    for (float v : n.tensor.data()) EXPECT_NEAR(v, want, 1e-6) << n.name;
  }
}

TEST(AdamW, ZeroGradientFixedPointAndDecoupledDecay) {
  auto p = filled_model(0.5f, 0.0f);
  train::AdamW<float> opt(p);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  opt.step(p, 0.1, cfg);
  for (const auto& n : p.named())
    for (float v : n.tensor.data()) EXPECT_EQ(v, 0.5f);

  cfg.weight_decay = 0.2;
  opt.step(p, 0.1, cfg);
  for (const auto& n : p.named())
    for (float v : n.tensor.data()) EXPECT_FLOAT_EQ(v, n.decays() ? 0.5f - 0.1f * 0.2f * 0.5f : 0.5f);
}

TEST(EarlyStopper, PatienceTwoOnDecreasingMetric) {
  train::EarlyStopper s(2);
  EXPECT_FALSE(s.update(1, 0.9));
  EXPECT_TRUE(s.improved());
  EXPECT_FALSE(s.update(2, 0.8));
  EXPECT_TRUE(s.update(3, 0.7));
  EXPECT_EQ(s.best_epoch(), 1u);
}

TEST(EarlyStopper, TieIsNotImprovement) {
  train::EarlyStopper s(1);
  s.update(1, 0.5);
  EXPECT_TRUE(s.update(2, 0.5));
  EXPECT_EQ(s.best_epoch(), 1u);
}

TEST(TrainConfig, JsonStrict) {
  TrainConfig c;
  c.peak_lr = 2e-3;
  c.beta2 = 0.99;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  j["lr"] = 1;
  EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
  c.patience = c.max_epochs;
  EXPECT_THROW(c.validate(), ConfigError);
}

struct TinyData {
  train::LabeledData train, val;
  model::ModelConfig model;
};

TinyData tiny_data() {
  auto w = data::gen_synthetic_world(tiny_world());
  auto sp = data::split(w.annotations, 0.75, 0.125, 0);
  return {train::make_labeled_data(w.features, sp.train), train::make_labeled_data(w.features, sp.val),
          tiny_model(3, 2, 8)};
}

TEST(LabeledData, JoinAndTargets) {
  auto w = data::gen_synthetic_world(tiny_world());
  auto d = train::make_labeled_data(w.features, w.annotations);
  EXPECT_EQ(d.size(), 80u);
  EXPECT_EQ(d.features.shape(), (nk::Shape{80, 4, 8}));
  EXPECT_EQ(d.labels, w.annotations.dense());

  auto c = tiny_model(3, 2, 8);
  EXPECT_EQ(train::training_targets(d, c), d.labels);
  c.variant = model::Variant::pre_mv_pool;
  auto mv = train::training_targets(d, c);
  ASSERT_EQ(mv.size(), 80u);
  for (std::size_t s = 0; s < 80; ++s) {
    std::array<int, 2> votes{};
    for (std::size_t a = 0; a < 3; ++a) ++votes[d.labels[s * 3 + a]];
    EXPECT_EQ(mv[s], votes[1] > votes[0] ? 1 : 0);
  }

  data::FeatureSet missing{{"nope"}, {nk::Tensor<float>::zeros({4, 8})}};
  EXPECT_THROW(train::make_labeled_data(missing, w.annotations), ContractError);
}

TEST(MeanAnnotatorAccuracy, SkipsUnlabeledAnnotators) {
  train::LabeledData d;
  d.sample_ids = {"a", "b"};
  d.n_annotators = 3;
  d.labels = {0, 1, -1, 0, 0, -1};
  EXPECT_DOUBLE_EQ(train::mean_annotator_accuracy({0, 1, 1, 1, 1, 1}, 3, d), (0.5 + 0.5) / 2);
  // Single-row predictions are compared with every annotator.
  EXPECT_DOUBLE_EQ(train::mean_annotator_accuracy({0, 0}, 1, d), (1.0 + 0.5) / 2);
}

TEST(Train, LossFallsAndPostClipNormBounded) {
  auto t = tiny_data();
  TrainConfig cfg;
  cfg.peak_lr = 3e-3;
  cfg.max_epochs = 50;
  cfg.patience = 49;
  cfg.batch_size = 16;
  std::size_t steps = 0;
  train::TrainHooks hooks;
  hooks.on_step = [&](std::size_t, double norm) {
    ++steps;
    EXPECT_LE(norm, 1.0 + 1e-7);
  };
  auto r = train::train<float>(t.model, t.train, t.val, cfg, hooks);
  const auto& h = r.history;
  EXPECT_EQ(steps, h.lr_trace.size());
  EXPECT_EQ(h.steps_per_epoch, 4u);  // 60 samples / 16
  EXPECT_EQ(h.total_steps, 200u);
  EXPECT_LE(h.epochs.back().train_loss, 0.5 * h.epochs.front().train_loss);
  for (std::size_t s = 0; s < h.lr_trace.size(); ++s) EXPECT_EQ(h.lr_trace[s], train::lr_at(s, 200, cfg));
  EXPECT_EQ(h.stopping_epoch, h.epochs.size());
  EXPECT_GE(h.best_metric, h.epochs.front().val_metric);
}

TEST(Train, EarlyStopsExactlyAtPatienceExhaustion) {
  auto t = tiny_data();
  TrainConfig cfg;
  cfg.max_epochs = 10;
  cfg.patience = 2;
  train::TrainHooks hooks;
  hooks.validation_metric = [](std::size_t epoch) { return 1.0 - 0.1 * static_cast<double>(epoch); };
  auto r = train::train<float>(t.model, t.train, t.val, cfg, hooks);
  EXPECT_TRUE(r.history.early_stopped);
  EXPECT_EQ(r.history.stopping_epoch, 3u);
  EXPECT_EQ(r.history.best_epoch, 1u);
  EXPECT_EQ(r.history.epochs.size(), 3u);
}

TEST(Train, DeterministicHistoryAndParams) {
  auto t = tiny_data();
  TrainConfig cfg;
  cfg.peak_lr = 1e-3;
  cfg.max_epochs = 4;
  cfg.patience = 3;
  auto a = train::train<float>(t.model, t.train, t.val, cfg);
  auto b = train::train<float>(t.model, t.train, t.val, cfg);
  EXPECT_EQ(nlohmann::json(a.history).dump(), nlohmann::json(b.history).dump());
  auto na = a.best.named(), nb = b.best.named();
  for (std::size_t i = 0; i < na.size(); ++i)
    EXPECT_TRUE(std::equal(na[i].tensor.data().begin(), na[i].tensor.data().end(), nb[i].tensor.data().begin()));
}

TEST(Train, DivergenceNamesStep) {
  auto t = tiny_data();
  t.train.features.mutable_data()[0] = NAN;
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.patience = 1;
  cfg.batch_size = 200;  // one step per epoch; sample 0 is in the first batch
  try {
    train::train<float>(t.model, t.train, t.val, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(History, JsonRoundTrip) {
  train::TrainHistory h;
  h.epochs = {{1, 0.5, 0.25, 1e-3}};
  h.lr_trace = {0.0, 1e-3};
  h.grad_norm_trace = {0.9, 1.0};
  h.steps_per_epoch = 2;
  h.total_steps = 2;
  h.stopping_epoch = 1;
  h.best_epoch = 1;
  h.best_metric = 0.25;
  nlohmann::json j = h;
  EXPECT_EQ(nlohmann::json(j.get<train::TrainHistory>()), j);
}

}  // namespace

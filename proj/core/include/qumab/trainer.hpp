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
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qumab/annotations.hpp"
#include "qumab/features.hpp"
#include "qumab/model.hpp"

namespace qumab::train {

using model::ModelConfig;
using model::ModelParams;
using nk::Tensor;

struct TrainConfig {
  double peak_lr = 1e-4;
  double weight_decay = 0.01;
  double clip_max_norm = 1.0;
  double warmup_fraction = 0.2;
  std::size_t max_epochs = 200;
  std::size_t patience = 25;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;  // throws ConfigError
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);  // rejects unknown keys

/// Linear warmup 0 -> peak over floor(warmup_fraction * total_steps) steps,
/// then peak * 0.5 * (1 + cos(pi * progress)) reaching 0 at total_steps.
/// Throws ContractError when step > total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

/// Global L2 norm over every parameter gradient (absent gradients count as 0).
template <class T>
double global_grad_norm(const ModelParams<T>& params);

/// Scales all gradients by max_norm / norm when the global norm exceeds
/// max_norm and returns the applied factor (1.0 when untouched). Throws
/// ContractError when no parameter carries a gradient.
template <class T>
double clip_gradients(ModelParams<T>& params, double max_norm);

/// Decoupled-weight-decay Adam. Moment estimates are kept in double; weight
/// decay only touches weight matrices (ParamKind::weight).
template <class T>
class AdamW {
 public:
  explicit AdamW(const ModelParams<T>& params);

  void step(ModelParams<T>& params, double lr, const TrainConfig& cfg);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Patience-based stopping on a metric that should increase.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Feeds the metric of a finished epoch (1-based); returns true when training
  /// should stop after this epoch. Returns whether the epoch is a new best via improved().
  bool update(std::size_t epoch, double metric);
  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_metric_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  double best_metric_ = -1.0;  // metrics live in [0, 1]; epoch 1 always improves
  std::size_t since_best_ = 0;
  bool improved_ = false;
};

/// Features stacked into one contiguous tensor plus dense labels.
struct LabeledData {
  Tensor<float> features;                 ///< [N, P, F] or [N, T, P, F]
  std::vector<std::int64_t> labels;       ///< [N x n_annotators], -1 unobserved
  std::vector<std::string> sample_ids;
  std::size_t n_annotators = 0;
  std::size_t n_classes = 0;

  std::size_t size() const { return sample_ids.size(); }
  bool sequence_mode() const { return features.rank() == 4; }
};

/// Joins features and annotations on sample id, keeping the annotation
/// sample order. drop_unlabeled skips samples without any label. Throws
/// ContractError when a sample has no features or nothing overlaps.
LabeledData make_labeled_data(const data::FeatureSet& features,
                              const data::AnnotationMatrix& annotations,
                              bool drop_unlabeled = true);

/// Targets for each output row: the raw labels, or for single-row (pre-vote
/// pooled) models the majority vote of each sample's raw labels.
std::vector<std::int64_t> training_targets(const LabeledData& data, const ModelConfig& config);

/// Predicted class per (sample, output row), evaluated in batches without
/// recording a tape.
template <class T>
std::vector<std::int64_t> predict(const ModelParams<T>& params, const ModelConfig& config,
                                  const LabeledData& data, std::size_t batch_size = 64);

/// Mean over annotators (with at least one label) of per-annotator accuracy.
/// Single-row predictions are compared against every annotator's labels.
double mean_annotator_accuracy(const std::vector<std::int64_t>& predictions,
                               std::size_t output_rows, const LabeledData& data);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;  ///< learning rate of the last step in the epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<double> lr_trace;         ///< per optimizer step
  std::vector<double> grad_norm_trace;  ///< per step, after clipping
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  std::size_t stopping_epoch = 0;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  bool early_stopped = false;
  std::string best_checkpoint;  ///< filled by callers that persist the best params
};

void to_json(nlohmann::json& j, const TrainHistory& h);
void from_json(const nlohmann::json& j, TrainHistory& h);

struct TrainHooks {
  /// Called after clipping on every step with (step, post-clip global norm).
  std::function<void(std::size_t, double)> on_step;
  /// Replaces the validation metric of an epoch (1-based) when set.
  std::function<double(std::size_t)> validation_metric;
};

template <class T>
struct TrainResult {
  ModelParams<T> best;
  TrainHistory history;
};

/// Seeded mini-batch AdamW with warmup/cosine schedule, clipping and early
/// stopping on mean per-annotator validation accuracy. Parameters are
/// initialized from cfg.seed. Throws TrainingError when the loss diverges.
template <class T>
TrainResult<T> train(const ModelConfig& model_config, const LabeledData& train_data,
                     const LabeledData& val_data, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

/// Same, starting from the given parameters.
template <class T>
TrainResult<T> train_from(const ModelConfig& model_config, ModelParams<T> params,
                          const LabeledData& train_data, const LabeledData& val_data,
                          const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace qumab::train

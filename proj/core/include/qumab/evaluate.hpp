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

#include <nlohmann/json.hpp>

#include "qumab/metrics.hpp"
#include "qumab/model.hpp"
#include "qumab/synthetic.hpp"
#include "qumab/trainer.hpp"

namespace qumab::eval {

struct AnnotatorMetrics {
  std::string annotator_id;
  std::size_t count = 0;            ///< evaluated (sample, annotator) pairs
  std::optional<double> accuracy;   ///< absent when count == 0
  std::optional<double> f1;
};

struct ConsensusMetrics {
  std::size_t count = 0;  ///< samples with enough raw votes for a reference
  double accuracy = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::vector<AnnotatorMetrics> annotators;
  double avg_accuracy = 0.0;  ///< mean over annotators with count > 0
  double avg_f1 = 0.0;
  std::optional<ConsensusMetrics> copr;
  F1Average f1_average = F1Average::macro;
  nlohmann::json config = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

struct EvalOptions {
  F1Average f1_average = F1Average::macro;
  /// Samples with fewer raw labels get no consensus reference.
  std::size_t min_consensus_votes = 2;
};

/// Scores predictions [N x rows] against labels [N x A] (-1 = unobserved).
/// rows is A, or 1 for a single pooled prediction shared by every annotator.
/// CoPr compares the majority vote of each sample's predicted row(s) with the
/// majority vote of its raw labels.
MetricsReport evaluate_predictions(std::span<const std::int64_t> predictions, std::size_t rows,
                                   const train::LabeledData& data,
                                   const std::vector<std::string>& annotator_ids,
                                   const EvalOptions& options = {});

template <class T>
MetricsReport evaluate(const model::ModelParams<T>& params, const model::ModelConfig& config,
                       const train::LabeledData& data,
                       const std::vector<std::string>& annotator_ids,
                       const EvalOptions& options = {});

/// Aligned text table: one column per annotator (A_1..A_n order), then Avg and
/// CoPr; rows Acc and F1. Values use four decimals.
std::string format_table(const MetricsReport& report);

inline constexpr int kTableDecimals = 4;

// ---- experiment harnesses --------------------------------------------------

struct ExperimentOptions {
  model::ModelConfig model;   ///< variant is overridden per cell; sizes follow the world
  train::TrainConfig train;   ///< seed is overridden per cell
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;
  std::size_t threads = 1;
  std::string cell_dir;       ///< non-empty: persist/resume finished cells here
  EvalOptions eval;
  /// Called (serialized) after each cell finishes or is loaded from cell_dir.
  std::function<void(const std::string& cell, bool resumed)> on_cell;
};

struct CellResult {
  double rate = 0.0;
  std::uint64_t seed = 0;
  model::Variant variant = model::Variant::full;
  MetricsReport report;
  std::size_t best_epoch = 0;
  std::size_t stopping_epoch = 0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const CellResult& c);
void from_json(const nlohmann::json& j, CellResult& c);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation (0 for a single value)
};

MeanStd mean_std(const std::vector<double>& values);

struct SweepRow {
  double rate = 0.0;
  model::Variant variant = model::Variant::full;
  MeanStd avg_accuracy, avg_f1, copr_accuracy, copr_f1;
  /// Per seed (full - sparse) / full on Avg accuracy, paired by seed with
  /// the rate-0 cell; averaged here. Zero for the rate-0 row.
  double mean_relative_drop = 0.0;
  /// (mean full - mean sparse) / mean full.
  double relative_drop_of_means = 0.0;
};

struct SweepResult {
  std::vector<CellResult> cells;  ///< (variant, rate, seed) order
  std::vector<SweepRow> rows;
};

void to_json(nlohmann::json& j, const SweepResult& s);

/// For each (variant, rate, seed): sparsify the training and validation
/// annotations at rate, train, evaluate on the untouched test split. Rate-0
/// cells are added when absent so every drop has a baseline.
SweepResult run_sparse_sweep(const data::SyntheticWorld& world, std::vector<double> rates,
                             const std::vector<std::uint64_t>& seeds,
                             const std::vector<model::Variant>& variants,
                             const ExperimentOptions& options);

struct AblationRow {
  std::string name;  ///< variant name, or "post_mv" for the consensus of full
  MeanStd avg_accuracy, avg_f1, copr_accuracy, copr_f1;
};

struct AblationResult {
  std::vector<CellResult> cells;
  std::vector<AblationRow> rows;
};

void to_json(nlohmann::json& j, const AblationResult& a);

/// Trains every variant with identical seeds and data at rate 0.
AblationResult run_ablation(const data::SyntheticWorld& world,
                            const std::vector<std::uint64_t>& seeds,
                            const ExperimentOptions& options);

/// Model config for a variant on a world: sizes copied from the world spec.
model::ModelConfig config_for_world(const model::ModelConfig& base, const data::WorldSpec& spec,
                                    model::Variant variant);

/// Builds (train, val, test) labeled data for a world; train and val
/// annotations are sparsified at rate with seed.
struct ExperimentData {
  train::LabeledData train, val, test;
  std::vector<std::string> annotator_ids;
};
ExperimentData prepare_experiment(const data::SyntheticWorld& world, double rate,
                                  std::uint64_t seed, const ExperimentOptions& options);

/// Runs one cell without persistence.
CellResult run_cell(const data::SyntheticWorld& world, double rate, std::uint64_t seed,
                    model::Variant variant, const ExperimentOptions& options);

}  // namespace qumab::eval

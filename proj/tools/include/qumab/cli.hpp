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

#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qumab/annotations.hpp"
#include "qumab/evaluate.hpp"
#include "qumab/features.hpp"
#include "qumab/synthetic.hpp"
#include "qumab/trainer.hpp"

namespace qumab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Where samples come from: an in-process synthetic world, or files.
struct DataSource {
  std::optional<data::WorldSpec> world;
  std::string features;       ///< QMFS file
  std::string annotations;    ///< CSV file
  std::string masks;          ///< optional masks JSON (enables recovery scores)
  std::string exclude_label;  ///< drop every annotation with this label
};

struct SplitConfig {
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct SweepConfig {
  std::string kind = "sparse";  ///< "sparse" or "ablation"
  std::vector<double> rates{0.0, 0.4};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::string> variants{"full", "no_self_attn"};
};

/// One JSON document configures every command. Unknown keys are rejected.
struct RunConfig {
  std::string out_dir = "run";
  DataSource data;
  nlohmann::json model = nlohmann::json::object();  ///< ModelConfig fields; sizes come from data
  train::TrainConfig train;
  SplitConfig split;
  eval::EvalOptions eval;
  SweepConfig sweep;

  /// Throws ConfigError (naming the field or missing path) on any problem.
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json run_config_json(const RunConfig& config);

/// Applies "dotted.key=value" to doc. The value is parsed as JSON when it is
/// valid JSON and taken as a string otherwise. Throws ConfigError for a
/// malformed assignment.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Loads the config file (or an empty document), applies overrides, parses.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

struct LoadedData {
  data::FeatureSet features;
  data::AnnotationMatrix annotations;
  std::optional<std::vector<std::vector<std::size_t>>> masks;
  std::optional<data::SyntheticWorld> world;
};

LoadedData load_data(const DataSource& source);

/// Model config with data-derived sizes filled in; explicit config values that
/// contradict the data raise ConfigError naming the field.
model::ModelConfig resolve_model_config(const nlohmann::json& model_json, const LoadedData& data);

/// Runs the command line (args excludes the program name). Returns the exit
/// code: 0 success, 1 runtime failure, 2 usage or configuration failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker count for sweeps from QUMAB_THREADS (default 1).
std::size_t threads_from_env();

}  // namespace qumab::cli

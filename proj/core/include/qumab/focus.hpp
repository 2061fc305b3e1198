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
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qumab/model.hpp"
#include "qumab/trainer.hpp"

namespace qumab::viz {

enum class FocusMode { patches, frames };

/// Non-negative weights over patches (or frames) summing to 1.
struct FocusMap {
  std::string annotator_id;
  std::vector<double> weights;
  nlohmann::json provenance = nlohmann::json::object();  ///< what was aggregated
};

/// Mean over heads and blocks of one annotator's cross-attention row, then
/// renormalized. In frames mode each frame's compressed-key masses are summed
/// first. sample selects one sample of the batch; all samples are averaged
/// when absent. Throws IndexError for an out-of-range annotator.
FocusMap extract_focus(const model::AttentionRecord& record, std::size_t annotator, FocusMode mode,
                       std::optional<std::size_t> sample = std::nullopt,
                       const std::string& annotator_id = {});

/// One map per (block, head) instead of the mean, for inspection.
std::vector<FocusMap> extract_focus_per_head(const model::AttentionRecord& record,
                                             std::size_t annotator, FocusMode mode,
                                             std::optional<std::size_t> sample = std::nullopt,
                                             const std::string& annotator_id = {});

/// Mass inside mask divided by |mask| / length(map): 1.0 is the uniform
/// baseline. Throws ContractError for an empty or repeated mask and IndexError
/// for an index past the map.
double focus_recovery_score(const FocusMap& map, const std::vector<std::size_t>& mask);

/// Scales weights to sum 1 (ContractError if they are negative or all zero).
FocusMap renormalized(FocusMap map);

/// Focus of every annotator averaged over all samples of data (forward passes
/// in batches). Throws ContractError for models without a Q-Former.
template <class T>
std::vector<FocusMap> dataset_focus(const model::ModelParams<T>& params,
                                    const model::ModelConfig& config,
                                    const train::LabeledData& data,
                                    const std::vector<std::string>& annotator_ids,
                                    std::size_t batch_size = 64);

/// Writes a binary PGM (P5, maxval 255, intensity round(255 * w / max w))
/// of rows x cols cells to path, and the raw weights to sidecar_path(path).
/// Throws ConfigError when rows * cols differs from the map length.
void export_heatmap(const FocusMap& map, std::pair<std::size_t, std::size_t> layout,
                    const std::string& path);

/// path with its extension replaced by ".json".
std::string sidecar_path(const std::string& pgm_path);

struct Heatmap {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

Heatmap read_pgm(const std::string& path);
FocusMap load_sidecar(const std::string& path);

}  // namespace qumab::viz

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
#include "qumab/focus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "qumab/errors.hpp"

namespace qumab::viz {

namespace {

std::vector<std::size_t> samples_of(const model::AttentionRecord& r, std::optional<std::size_t> sample) {
  if (sample) {
    if (*sample >= r.batch) throw IndexError("focus: sample index out of range");
    return {*sample};
  }
  std::vector<std::size_t> all(r.batch);
  for (std::size_t i = 0; i < r.batch; ++i) all[i] = i;
  return all;
}

void check_record(const model::AttentionRecord& r, std::size_t annotator, FocusMode mode) {
  if (r.n_blocks() == 0 || r.batch == 0) {
    throw ContractError("focus: attention record is empty (model without a Q-Former?)");
  }
  if (annotator >= r.n_queries) {
    throw IndexError("focus: annotator " + std::to_string(annotator) + " out of range [0, " +
                     std::to_string(r.n_queries) + ")");
  }
  if (mode == FocusMode::frames && r.n_frames == 0) {
    throw ContractError("focus: frames mode needs a sequence-mode record");
  }
}

// Accumulates one (block, head) row into acc; returns nothing, rows are
// already normalized by the softmax.
void accumulate(const model::AttentionRecord& r, std::size_t block, std::size_t sample,
                std::size_t head, std::size_t annotator, FocusMode mode, std::vector<double>& acc) {
  if (mode == FocusMode::frames) {
    const auto mass = r.frame_mass(block, sample, head, annotator);
    for (std::size_t t = 0; t < mass.size(); ++t) acc[t] += mass[t];
  } else {
    const auto row = r.cross_row(block, sample, head, annotator);
    for (std::size_t k = 0; k < row.size(); ++k) acc[k] += row[k];
  }
}

std::size_t map_length(const model::AttentionRecord& r, FocusMode mode) {
  return mode == FocusMode::frames ? r.n_frames : r.n_keys;
}

}  // namespace

FocusMap renormalized(FocusMap map) {
  double sum = 0;
  for (double w : map.weights) {
    if (!(w >= 0)) throw ContractError("focus map has a negative or non-finite weight");
    sum += w;
  }
  if (!(sum > 0)) throw ContractError("focus map has no mass");
  for (double& w : map.weights) w /= sum;
  return map;
}

FocusMap extract_focus(const model::AttentionRecord& record, std::size_t annotator, FocusMode mode,
                       std::optional<std::size_t> sample, const std::string& annotator_id) {
  check_record(record, annotator, mode);
  const auto samples = samples_of(record, sample);
  FocusMap map;
  map.annotator_id = annotator_id;
  map.weights.assign(map_length(record, mode), 0.0);
  for (auto s : samples) {
    for (std::size_t b = 0; b < record.n_blocks(); ++b) {
      for (std::size_t h = 0; h < record.heads; ++h) accumulate(record, b, s, h, annotator, mode, map.weights);
    }
  }
  map.provenance = {{"aggregation", "mean"},
                    {"blocks", record.n_blocks()},
                    {"heads", record.heads},
                    {"samples", samples.size()},
                    {"mode", mode == FocusMode::frames ? "frames" : "patches"}};
  return renormalized(std::move(map));
}

std::vector<FocusMap> extract_focus_per_head(const model::AttentionRecord& record,
                                             std::size_t annotator, FocusMode mode,
                                             std::optional<std::size_t> sample,
                                             const std::string& annotator_id) {
  check_record(record, annotator, mode);
  const auto samples = samples_of(record, sample);
  std::vector<FocusMap> out;
  for (std::size_t b = 0; b < record.n_blocks(); ++b) {
    for (std::size_t h = 0; h < record.heads; ++h) {
      FocusMap map;
      map.annotator_id = annotator_id;
      map.weights.assign(map_length(record, mode), 0.0);
      for (auto s : samples) accumulate(record, b, s, h, annotator, mode, map.weights);
      map.provenance = {{"aggregation", "single"},
                        {"block", b},
                        {"head", h},
                        {"samples", samples.size()},
                        {"mode", mode == FocusMode::frames ? "frames" : "patches"}};
      out.push_back(renormalized(std::move(map)));
    }
  }
  return out;
}

double focus_recovery_score(const FocusMap& map, const std::vector<std::size_t>& mask) {
  if (mask.empty()) throw ContractError("focus_recovery_score: empty mask");
  const std::set<std::size_t> unique(mask.begin(), mask.end());
  if (unique.size() != mask.size()) throw ContractError("focus_recovery_score: repeated mask index");
  if (*unique.rbegin() >= map.weights.size()) {
    throw IndexError("focus_recovery_score: mask index " + std::to_string(*unique.rbegin()) +
                     " past map of length " + std::to_string(map.weights.size()));
  }
  double total = 0, inside = 0;
  for (double w : map.weights) total += w;
  for (auto i : mask) inside += map.weights[i];
  if (!(total > 0)) throw ContractError("focus_recovery_score: map has no mass");
  const double baseline = static_cast<double>(mask.size()) / static_cast<double>(map.weights.size());
  return (inside / total) / baseline;
}

template <class T>
std::vector<FocusMap> dataset_focus(const model::ModelParams<T>& params,
                                    const model::ModelConfig& config,
                                    const train::LabeledData& data,
                                    const std::vector<std::string>& annotator_ids,
                                    std::size_t batch_size) {
  if (!params.annotator_qformer) throw ContractError("dataset_focus: model has no Q-Former");
  if (annotator_ids.size() != config.n_annotators) {
    throw ContractError("dataset_focus: annotator id count mismatch");
  }
  if (data.size() == 0 || batch_size == 0) throw ContractError("dataset_focus: no samples");
  const auto mode = data.sequence_mode() ? FocusMode::frames : FocusMode::patches;
  const auto per = data.features.numel() / data.size();
  std::vector<std::vector<double>> sums(config.n_annotators);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto n = std::min(batch_size, data.size() - start);
    std::vector<T> buf(data.features.data().begin() + start * per,
                       data.features.data().begin() + (start + n) * per);
    auto shape = data.features.shape();
    shape[0] = n;
    nk::Tensor<T> x(std::move(shape), std::move(buf));
    nk::Tape<T> no_grad(false);
    model::AttentionRecord record;
    if (data.sequence_mode()) model::forward_sequence(no_grad, x, params, config, &record);
    else model::forward_image(no_grad, x, params, config, &record);
    for (std::size_t a = 0; a < config.n_annotators; ++a) {
      for (std::size_t s = 0; s < n; ++s) {
        // Per-sample maps are averaged with equal weight.
        auto m = extract_focus(record, a, mode, s);
        if (sums[a].empty()) sums[a].assign(m.weights.size(), 0.0);
        for (std::size_t k = 0; k < m.weights.size(); ++k) sums[a][k] += m.weights[k];
      }
    }
  }
  std::vector<FocusMap> out;
  for (std::size_t a = 0; a < config.n_annotators; ++a) {
    FocusMap m{annotator_ids[a], std::move(sums[a]),
               {{"aggregation", "mean"},
                {"blocks", config.n_blocks},
                {"heads", config.n_heads},
                {"samples", data.size()},
                {"mode", mode == FocusMode::frames ? "frames" : "patches"}}};
    out.push_back(renormalized(std::move(m)));
  }
  return out;
}

template std::vector<FocusMap> dataset_focus(const model::ModelParams<float>&,
                                             const model::ModelConfig&, const train::LabeledData&,
                                             const std::vector<std::string>&, std::size_t);
template std::vector<FocusMap> dataset_focus(const model::ModelParams<double>&,
                                             const model::ModelConfig&, const train::LabeledData&,
                                             const std::vector<std::string>&, std::size_t);

std::string sidecar_path(const std::string& pgm_path) {
  return std::filesystem::path(pgm_path).replace_extension(".json").string();
}

void export_heatmap(const FocusMap& map, std::pair<std::size_t, std::size_t> layout,
                    const std::string& path) {
  const auto [rows, cols] = layout;
  if (rows * cols != map.weights.size() || rows == 0) {
    throw ConfigError("heatmap layout " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " does not match a map of " + std::to_string(map.weights.size()) + " weights");
  }
  const double max_w = *std::max_element(map.weights.begin(), map.weights.end());
  if (!(max_w > 0)) throw ContractError("heatmap: map has no mass");
  std::ofstream pgm(path, std::ios::binary | std::ios::trunc);
  if (!pgm) throw IoError("cannot write " + path);
  pgm << "P5\n" << cols << ' ' << rows << "\n255\n";
  for (double w : map.weights) {
    const auto level = static_cast<long>(std::lround(255.0 * w / max_w));
    pgm.put(static_cast<char>(std::clamp<long>(level, 0, 255)));
  }
  if (!pgm) throw IoError("failed writing " + path);

  const nlohmann::json sidecar{{"annotator_id", map.annotator_id},
                               {"weights", map.weights},
                               {"layout", {rows, cols}},
                               {"provenance", map.provenance}};
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw IoError("cannot write " + sidecar_path(path));
  js << sidecar.dump(2) << '\n';
}

Heatmap read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  Heatmap h;
  int maxval = 0;
  in >> magic >> h.cols >> h.rows >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw FormatError(path + " is not an 8-bit P5 PGM");
  in.get();  // single whitespace before the raster
  h.pixels.resize(h.rows * h.cols);
  in.read(reinterpret_cast<char*>(h.pixels.data()), static_cast<std::streamsize>(h.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(h.pixels.size())) {
    throw FormatError(path + ": truncated raster");
  }
  return h;
}

FocusMap load_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    const auto j = nlohmann::json::parse(in);
    return FocusMap{j.at("annotator_id").get<std::string>(),
                    j.at("weights").get<std::vector<double>>(),
                    j.value("provenance", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace qumab::viz

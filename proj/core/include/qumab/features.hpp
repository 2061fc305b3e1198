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
#include <vector>

#include "qumab/tensor.hpp"

namespace qumab::data {

/// Precomputed encoder features, one tensor per sample: [P, F] (image mode)
/// or [T, P, F] (sequence mode).
struct FeatureSet {
  std::vector<std::string> sample_ids;
  std::vector<nk::Tensor<float>> features;

  std::size_t size() const { return sample_ids.size(); }
  /// Throws IntegrityError on mismatched counts, duplicate ids, mixed ranks
  /// or mixed feature_dim.
  void validate() const;
  std::size_t feature_dim() const;
  bool sequence_mode() const { return !features.empty() && features.front().rank() == 3; }
  std::optional<std::size_t> find(const std::string& sample_id) const;
};

/// "QMFS", u32 n_samples, then per sample: u32 id length, id bytes, u8 rank,
/// u32 extents[rank], f32 payload. Round trip is bit-exact.
void save_features(const std::string& path, const FeatureSet& set);
std::string encode_features(const FeatureSet& set);
/// Throws FormatError on bad magic or truncated data, IoError when unreadable.
FeatureSet load_features(const std::string& path);
FeatureSet decode_features(const std::string& bytes);

}  // namespace qumab::data

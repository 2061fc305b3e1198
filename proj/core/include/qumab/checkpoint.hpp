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

#include <string>

#include <nlohmann/json.hpp>

#include "qumab/model.hpp"

/// A checkpoint is a directory holding checkpoint.bin (one QMTN tensor record
/// per parameter, concatenated in canonical order) and checkpoint.json, the
/// manifest mapping parameter names to byte offset, shape and dtype next to
/// the ModelConfig and caller-supplied metadata.
namespace qumab::io {

inline constexpr const char* kCheckpointFormat = "qumab-checkpoint-1";

template <class T>
struct Checkpoint {
  model::ModelConfig config;
  model::ModelParams<T> params;
  nlohmann::json extra = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const std::string& dir, const model::ModelConfig& config,
                     const model::ModelParams<T>& params,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Loads into T regardless of the stored width. Throws IoError when files are
/// missing, FormatError on a corrupt or inconsistent manifest/payload.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& dir);

/// Only the manifest (cheap; used to validate compatibility before loading).
nlohmann::json load_checkpoint_manifest(const std::string& dir);

}  // namespace qumab::io

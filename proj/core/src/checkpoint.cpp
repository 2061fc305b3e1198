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
#include "qumab/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "qumab/errors.hpp"
#include "qumab/serialize.hpp"

namespace qumab::io {

namespace fs = std::filesystem;

namespace {

fs::path bin_path(const std::string& dir) { return fs::path(dir) / "checkpoint.bin"; }
fs::path manifest_path(const std::string& dir) { return fs::path(dir) / "checkpoint.json"; }

}  // namespace

template <class T>
void save_checkpoint(const std::string& dir, const model::ModelConfig& config,
                     const model::ModelParams<T>& params, const nlohmann::json& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());

  std::ofstream bin(bin_path(dir), std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + bin_path(dir).string());
  auto tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params.named()) {
    const auto bytes = write_tensor(bin, p.tensor);
    tensors.push_back({{"name", p.name},
                       {"offset", offset},
                       {"shape", p.tensor.shape()},
                       {"dtype", std::is_same_v<T, float> ? "f32" : "f64"}});
    offset += bytes;
  }
  bin.close();
  if (!bin) throw IoError("failed writing " + bin_path(dir).string());

  nlohmann::json manifest{{"format", kCheckpointFormat},
                          {"config", config},
                          {"tensors", tensors},
                          {"payload_bytes", offset},
                          {"extra", extra}};
  std::ofstream js(manifest_path(dir), std::ios::trunc);
  if (!js) throw IoError("cannot write " + manifest_path(dir).string());
  js << manifest.dump(2) << '\n';
  if (!js) throw IoError("failed writing " + manifest_path(dir).string());
}

nlohmann::json load_checkpoint_manifest(const std::string& dir) {
  std::ifstream js(manifest_path(dir));
  if (!js) throw IoError("cannot open checkpoint manifest " + manifest_path(dir).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest " + manifest_path(dir).string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kCheckpointFormat) {
    throw FormatError("checkpoint manifest " + manifest_path(dir).string() +
                      " is not a " + kCheckpointFormat + " document");
  }
  return manifest;
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& dir) {
  const auto manifest = load_checkpoint_manifest(dir);
  Checkpoint<T> out;
  try {
    out.config = manifest.at("config").get<model::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  out.extra = manifest.value("extra", nlohmann::json::object());
  out.params = model::allocate_model<T>(out.config);

  std::map<std::string, std::size_t> offsets;
  try {
    for (const auto& t : manifest.at("tensors")) {
      offsets[t.at("name").get<std::string>()] = t.at("offset").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint tensor index: ") + e.what());
  }

  std::ifstream bin(bin_path(dir), std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint payload " + bin_path(dir).string());
  auto named = out.params.named();
  if (offsets.size() != named.size()) {
    throw FormatError("checkpoint lists " + std::to_string(offsets.size()) +
                      " tensors, config implies " + std::to_string(named.size()));
  }
  for (auto& p : named) {
    auto it = offsets.find(p.name);
    if (it == offsets.end()) throw FormatError("checkpoint is missing tensor " + p.name);
    bin.seekg(static_cast<std::streamoff>(it->second));
    auto t = read_tensor_as<T>(bin);
    if (t.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + nk::shape_str(t.shape()) +
                        ", config implies " + nk::shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  return out;
}

template void save_checkpoint(const std::string&, const model::ModelConfig&,
                              const model::ModelParams<float>&, const nlohmann::json&);
template void save_checkpoint(const std::string&, const model::ModelConfig&,
                              const model::ModelParams<double>&, const nlohmann::json&);
template Checkpoint<float> load_checkpoint<float>(const std::string&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace qumab::io

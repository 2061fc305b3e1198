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
#include "qumab/features.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "qumab/errors.hpp"
#include "qumab/serialize.hpp"

namespace qumab::data {

namespace {
constexpr char kMagic[4] = {'Q', 'M', 'F', 'S'};
}

void FeatureSet::validate() const {
  if (sample_ids.size() != features.size()) {
    throw IntegrityError("feature set: " + std::to_string(sample_ids.size()) + " ids for " +
                         std::to_string(features.size()) + " tensors");
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!seen.insert(sample_ids[i]).second) {
      throw IntegrityError("feature set: duplicate sample id '" + sample_ids[i] + "'");
    }
    const auto& t = features[i];
    if (!t.defined() || (t.rank() != 2 && t.rank() != 3)) {
      throw IntegrityError("feature set: sample '" + sample_ids[i] + "' must be rank 2 or 3");
    }
    if (t.rank() != features.front().rank()) {
      throw IntegrityError("feature set: mixed image and sequence samples");
    }
    if (t.shape().back() != features.front().shape().back()) {
      throw IntegrityError("feature set: sample '" + sample_ids[i] + "' has feature_dim " +
                           std::to_string(t.shape().back()) + ", expected " +
                           std::to_string(features.front().shape().back()));
    }
  }
}

std::size_t FeatureSet::feature_dim() const {
  return features.empty() ? 0 : features.front().shape().back();
}

std::optional<std::size_t> FeatureSet::find(const std::string& sample_id) const {
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    if (sample_ids[i] == sample_id) return i;
  }
  return std::nullopt;
}

std::string encode_features(const FeatureSet& set) {
  set.validate();
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  io::write_u32(os, static_cast<std::uint32_t>(set.size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& id = set.sample_ids[i];
    const auto& t = set.features[i];
    io::write_u32(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    io::write_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  return os.str();
}

void save_features(const std::string& path, const FeatureSet& set) {
  const auto bytes = encode_features(set);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path);
}

FeatureSet decode_features(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("feature container: bad or missing magic");
  }
  FeatureSet set;
  const auto n = io::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = io::read_u32(is);
    std::string id(len, '\0');
    if (len && !is.read(id.data(), len)) throw FormatError("feature container: truncated id");
    const auto rank = io::read_u8(is);
    if (rank == 0) throw FormatError("feature container: zero rank");
    nk::Shape shape(rank);
    for (auto& e : shape) {
      e = io::read_u32(is);
      if (e == 0) throw FormatError("feature container: zero extent");
    }
    std::vector<float> data(nk::shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw FormatError("feature container: truncated payload for sample '" + id + "'");
    }
    set.sample_ids.push_back(std::move(id));
    set.features.emplace_back(std::move(shape), std::move(data));
  }
  return set;
}

FeatureSet load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open feature file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return decode_features(ss.str());
}

}  // namespace qumab::data

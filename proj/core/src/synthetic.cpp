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
#include "qumab/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>

#include <nlohmann/json.hpp>

#include "qumab/errors.hpp"

namespace qumab::data {

namespace {

// Cosines closer than this count as tied; ties go to the lowest class index.
constexpr double kTieTolerance = 1e-9;

std::size_t grid_rows(std::size_t n_patches) { return patch_grid(n_patches).first; }

// Most square h x w rectangle (h <= w) of mask_size patches that fits the grid.
std::optional<std::pair<std::size_t, std::size_t>> region_shape(const WorldSpec& spec) {
  const auto [rows, cols] = patch_grid(spec.n_patches);
  std::optional<std::pair<std::size_t, std::size_t>> best;
  for (std::size_t h = 1; h * h <= spec.mask_size; ++h) {
    if (spec.mask_size % h != 0) continue;
    const auto w = spec.mask_size / h;
    if ((h <= rows && w <= cols) || (w <= rows && h <= cols)) best = {h, w};
  }
  return best;
}

}  // namespace

std::pair<std::size_t, std::size_t> patch_grid(std::size_t n_patches) {
  std::size_t rows = 1;
  for (std::size_t r = 1; r * r <= n_patches; ++r) {
    if (n_patches % r == 0) rows = r;
  }
  return {rows, n_patches / rows};
}

void WorldSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("world spec: " + msg); };
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (n_patches < 1) fail("n_patches must be >= 1");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (n_annotators < 1) fail("n_annotators must be >= 1");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (n_classes > feature_dim) fail("n_classes must not exceed feature_dim");
  if (mask_size < 1 || mask_size > mask_units()) {
    fail("mask_size " + std::to_string(mask_size) + " infeasible for " +
         std::to_string(mask_units()) + " maskable units");
  }
  if (mask_layout != "region" && mask_layout != "overlapping" && mask_layout != "disjoint") {
    fail("mask_layout must be 'region', 'overlapping' or 'disjoint'");
  }
  if (mask_layout == "region" && !sequence_mode() && !region_shape(*this)) {
    fail("no rectangle of " + std::to_string(mask_size) + " patches fits the " +
         std::to_string(grid_rows(n_patches)) + "x" +
         std::to_string(n_patches / grid_rows(n_patches)) + " patch grid");
  }
  if (mask_layout == "disjoint" && n_annotators * mask_size > mask_units()) {
    fail("disjoint masks need n_annotators * mask_size <= " + std::to_string(mask_units()));
  }
  if (!(noise_level >= 0.0 && noise_level < 1.0)) fail("noise_level must lie in [0, 1)");
  if (signal_strength < 0 || signal_noise < 0 || position_scale < 0 || feature_noise < 0) {
    fail("scales must be non-negative");
  }
  if (forced_class >= static_cast<std::int64_t>(n_classes)) fail("forced_class out of range");
}

void to_json(nlohmann::json& j, const WorldSpec& s) {
  j = nlohmann::json{{"n_samples", s.n_samples},
                     {"n_patches", s.n_patches},
                     {"feature_dim", s.feature_dim},
                     {"n_annotators", s.n_annotators},
                     {"n_classes", s.n_classes},
                     {"mask_size", s.mask_size},
                     {"noise_level", s.noise_level},
                     {"mask_layout", s.mask_layout},
                     {"n_frames", s.n_frames},
                     {"signal_strength", s.signal_strength},
                     {"signal_noise", s.signal_noise},
                     {"position_scale", s.position_scale},
                     {"feature_noise", s.feature_noise},
                     {"forced_class", s.forced_class},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, WorldSpec& s) {
  if (!j.is_object()) throw ConfigError("world spec must be a JSON object");
  WorldSpec out;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_samples") out.n_samples = v.get<std::size_t>();
      else if (key == "n_patches") out.n_patches = v.get<std::size_t>();
      else if (key == "feature_dim") out.feature_dim = v.get<std::size_t>();
      else if (key == "n_annotators") out.n_annotators = v.get<std::size_t>();
      else if (key == "n_classes") out.n_classes = v.get<std::size_t>();
      else if (key == "mask_size") out.mask_size = v.get<std::size_t>();
      else if (key == "noise_level") out.noise_level = v.get<double>();
      else if (key == "mask_layout") out.mask_layout = v.get<std::string>();
      else if (key == "n_frames") out.n_frames = v.get<std::size_t>();
      else if (key == "signal_strength") out.signal_strength = v.get<double>();
      else if (key == "signal_noise") out.signal_noise = v.get<double>();
      else if (key == "position_scale") out.position_scale = v.get<double>();
      else if (key == "feature_noise") out.feature_noise = v.get<double>();
      else if (key == "forced_class") out.forced_class = v.get<std::int64_t>();
      else if (key == "seed") out.seed = v.get<std::uint64_t>();
      else throw ConfigError("world spec: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("world spec: bad value for '" + key + "': " + e.what());
    }
  }
  s = out;
}

WorldSpec standard_world_spec() { return WorldSpec{}; }

namespace {

std::string padded(const std::string& prefix, std::size_t i, std::size_t count) {
  const auto width = std::to_string(count > 0 ? count - 1 : 0).size();
  auto digits = std::to_string(i);
  return prefix + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

}  // namespace

SyntheticWorld gen_synthetic_world(WorldSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return gen_synthetic_world(spec);
}

SyntheticWorld gen_synthetic_world(const WorldSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const auto d = spec.feature_dim;
  const auto C = spec.n_classes;
  const auto units = spec.mask_units();

  SyntheticWorld w;
  w.spec = spec;

  // Fixed structure: class directions, position codes, masks.
  // Random orthonormal class directions (Gram-Schmidt on Gaussian draws), so
  // tied class counts inside a mask give tied cosines.
  w.class_directions.assign(C, std::vector<double>(d));
  for (std::size_t c = 0; c < C; ++c) {
    auto& dir = w.class_directions[c];
    for (auto& v : dir) v = normal(rng);
    for (std::size_t prev = 0; prev < c; ++prev) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += dir[j] * w.class_directions[prev][j];
      for (std::size_t j = 0; j < d; ++j) dir[j] -= dot * w.class_directions[prev][j];
    }
    double norm = 0;
    for (auto v : dir) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;
  }
  // Separable position code: one random code per grid row plus one per column.
  const auto rows = grid_rows(spec.n_patches);
  const auto cols = spec.n_patches / rows;
  std::vector<double> row_code(rows * d), col_code(cols * d);
  for (auto& v : row_code) v = spec.position_scale * std::numbers::sqrt2 / 2 * normal(rng);
  for (auto& v : col_code) v = spec.position_scale * std::numbers::sqrt2 / 2 * normal(rng);
  std::vector<double> position(spec.n_patches * d);
  for (std::size_t p = 0; p < spec.n_patches; ++p) {
    for (std::size_t j = 0; j < d; ++j) {
      position[p * d + j] = row_code[(p / cols) * d + j] + col_code[(p % cols) * d + j];
    }
  }

  std::vector<std::size_t> pool(units);
  std::iota(pool.begin(), pool.end(), 0);
  if (spec.mask_layout == "disjoint") std::shuffle(pool.begin(), pool.end(), rng);
  for (std::size_t k = 0; k < spec.n_annotators; ++k) {
    std::vector<std::size_t> mask;
    if (spec.mask_layout == "region" && spec.sequence_mode()) {
      // A window of consecutive frames.
      std::uniform_int_distribution<std::size_t> start(0, units - spec.mask_size);
      const auto first = start(rng);
      for (std::size_t u = first; u < first + spec.mask_size; ++u) mask.push_back(u);
    } else if (spec.mask_layout == "region") {
      auto [h, w_] = *region_shape(spec);
      const bool fits = h <= rows && w_ <= cols;
      const bool fits_rotated = w_ <= rows && h <= cols;
      if (!fits || (fits_rotated && h != w_ && uniform(rng) < 0.5)) std::swap(h, w_);
      std::uniform_int_distribution<std::size_t> top(0, rows - h), left(0, cols - w_);
      const auto r0 = top(rng);
      const auto c0 = left(rng);
      for (std::size_t r = r0; r < r0 + h; ++r) {
        for (std::size_t c = c0; c < c0 + w_; ++c) mask.push_back(r * cols + c);
      }
    } else if (spec.mask_layout == "disjoint") {
      mask.assign(pool.begin() + k * spec.mask_size, pool.begin() + (k + 1) * spec.mask_size);
    } else {
      std::vector<std::size_t> order(units);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      mask.assign(order.begin(), order.begin() + spec.mask_size);
    }
    std::sort(mask.begin(), mask.end());
    w.masks.push_back(std::move(mask));
  }

  std::vector<std::string> vocab;
  for (std::size_t c = 0; c < C; ++c) vocab.push_back(padded("c", c, C));
  w.annotations = AnnotationMatrix(vocab);
  w.clean_annotations = AnnotationMatrix(vocab);
  std::vector<std::string> annotator_ids;
  for (std::size_t k = 0; k < spec.n_annotators; ++k) {
    annotator_ids.push_back(padded("A", k + 1, spec.n_annotators + 1));
    w.annotations.add_annotator(annotator_ids.back());
    w.clean_annotations.add_annotator(annotator_ids.back());
  }

  std::uniform_int_distribution<std::int64_t> class_dist(0, static_cast<std::int64_t>(C) - 1);
  std::uniform_int_distribution<std::int64_t> other_dist(0, static_cast<std::int64_t>(C) - 2);
  std::vector<double> signal(units * d);
  std::vector<double> mean(d);
  for (std::size_t s = 0; s < spec.n_samples; ++s) {
    const auto sample_id = padded("s", s, spec.n_samples);
    // Planted signal per maskable unit.
    for (std::size_t u = 0; u < units; ++u) {
      const auto c = spec.forced_class >= 0 ? spec.forced_class : class_dist(rng);
      for (std::size_t j = 0; j < d; ++j) {
        signal[u * d + j] = spec.signal_strength * w.class_directions[c][j] +
                            spec.signal_noise * normal(rng);
      }
    }
    // Features: position code + planted signal + i.i.d. noise.
    const auto frames = spec.sequence_mode() ? spec.n_frames : 1;
    std::vector<float> feat(frames * spec.n_patches * d);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t p = 0; p < spec.n_patches; ++p) {
        const auto unit = spec.sequence_mode() ? t : p;
        for (std::size_t j = 0; j < d; ++j) {
          feat[(t * spec.n_patches + p) * d + j] = static_cast<float>(
              position[p * d + j] + signal[unit * d + j] + spec.feature_noise * normal(rng));
        }
      }
    }
    w.features.sample_ids.push_back(sample_id);
    if (spec.sequence_mode()) {
      w.features.features.emplace_back(nk::Shape{frames, spec.n_patches, d}, std::move(feat));
    } else {
      w.features.features.emplace_back(nk::Shape{spec.n_patches, d}, std::move(feat));
    }

    w.annotations.add_sample(sample_id);
    w.clean_annotations.add_sample(sample_id);
    for (std::size_t k = 0; k < spec.n_annotators; ++k) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (auto u : w.masks[k]) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += signal[u * d + j];
      }
      for (auto& v : mean) v /= static_cast<double>(w.masks[k].size());
      double mean_norm = 0;
      for (auto v : mean) mean_norm += v * v;
      mean_norm = std::sqrt(mean_norm);
      std::int64_t best = 0;
      double best_score = -2.0;
      for (std::size_t c = 0; c < C; ++c) {
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += mean[j] * w.class_directions[c][j];
        const double cosine = mean_norm > 0 ? dot / mean_norm : 0.0;
        if (cosine > best_score + kTieTolerance) {
          best_score = cosine;
          best = static_cast<std::int64_t>(c);
        }
      }
      auto observed = best;
      if (uniform(rng) < spec.noise_level) {
        const auto other = other_dist(rng);
        observed = other >= best ? other + 1 : other;
      }
      w.clean_annotations.set(s, k, best);
      w.annotations.set(s, k, observed);
    }
  }
  return w;
}

nlohmann::json masks_to_json(const SyntheticWorld& world) {
  return nlohmann::json{{"mode", world.spec.sequence_mode() ? "frames" : "patches"},
                        {"n_units", world.spec.mask_units()},
                        {"annotators", world.annotations.annotator_ids()},
                        {"masks", world.masks}};
}

std::vector<std::vector<std::size_t>> masks_from_json(const nlohmann::json& j) {
  try {
    return j.at("masks").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("masks JSON: ") + e.what());
  }
}

}  // namespace qumab::data

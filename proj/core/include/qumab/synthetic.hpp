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
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qumab/annotations.hpp"
#include "qumab/features.hpp"

namespace qumab::data {

/// Generator parameters of a synthetic annotator world.
///
/// Every sample is a grid of patches (or, with n_frames > 0, a sequence of
/// frames). Each patch/frame carries a latent class whose fixed random unit
/// direction (the directions are orthonormal) is planted into its features.
/// Annotator k only looks at its own mask of patches/frames: its clean label is
/// the class whose direction has the highest cosine with the mean planted
/// signal inside the mask (ties to the lowest class index), and the
/// observed label is flipped to a uniformly chosen other class with
/// probability noise_level. Features also carry a fixed per-patch position
/// code (a row code plus a column code) so that a mask is locatable from the
/// features alone.
///
/// Mask layouts: "region" picks a random axis-aligned rectangle of the patch
/// grid (a window of consecutive frames in sequence mode), "overlapping"
/// picks a random subset per annotator, "disjoint" random non-overlapping subsets.
struct WorldSpec {
  std::size_t n_samples = 2000;
  std::size_t n_patches = 64;
  std::size_t feature_dim = 32;
  std::size_t n_annotators = 12;
  std::size_t n_classes = 4;
  std::size_t mask_size = 8;
  double noise_level = 0.1;
  std::string mask_layout = "region";
  std::size_t n_frames = 0;                 ///< > 0: masks select frames, not patches
  double signal_strength = 1.0;
  double signal_noise = 0.0;     ///< isotropic noise inside the planted signal
  double position_scale = 0.5;   ///< per-coordinate std of the fixed per-patch position code
  double feature_noise = 0.05;   ///< i.i.d. normal noise added to every feature
  std::int64_t forced_class = -1;  ///< >= 0 plants this class in every patch
  std::uint64_t seed = 7;

  void validate() const;  // throws ConfigError for infeasible specs
  bool sequence_mode() const { return n_frames > 0; }
  /// Number of maskable units: frames in sequence mode, patches otherwise.
  std::size_t mask_units() const { return sequence_mode() ? n_frames : n_patches; }
  bool operator==(const WorldSpec&) const = default;
};

void to_json(nlohmann::json& j, const WorldSpec& s);
void from_json(const nlohmann::json& j, WorldSpec& s);  // rejects unknown keys

/// Patch grid (rows, cols) used for position codes and region masks: rows is
/// the largest divisor of n_patches not above its square root.
std::pair<std::size_t, std::size_t> patch_grid(std::size_t n_patches);

/// The standard acceptance world: 12 annotators, 2000 samples, 64 patches,
/// feature_dim 32, 4 classes, mask size 8, noise 0.1, seed 7.
WorldSpec standard_world_spec();

struct SyntheticWorld {
  WorldSpec spec;
  FeatureSet features;
  std::vector<std::vector<std::size_t>> masks;  ///< per annotator, sorted unit indices
  AnnotationMatrix annotations;                 ///< observed (noisy) labels
  AnnotationMatrix clean_annotations;           ///< labels before the noise flip
  std::vector<std::vector<double>> class_directions;
};

SyntheticWorld gen_synthetic_world(const WorldSpec& spec);
SyntheticWorld gen_synthetic_world(WorldSpec spec, std::uint64_t seed);

/// {"mode": "patches"|"frames", "n_units": N, "annotators": [...], "masks": [[...], ...]}
nlohmann::json masks_to_json(const SyntheticWorld& world);
std::vector<std::vector<std::size_t>> masks_from_json(const nlohmann::json& j);

}  // namespace qumab::data

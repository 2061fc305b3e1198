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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qumab/tape.hpp"
#include "qumab/tensor.hpp"

namespace qumab::model {

using nk::Tape;
using nk::Tensor;

/// Architecture variants used by the ablation battery.
enum class Variant {
  full,                ///< self-attention + cross-attention + per-annotator classifiers
  base,                ///< mean-pooled features straight into per-annotator classifiers
  unified_classifier,  ///< one classifier shared by every annotator representation
  no_self_attn,        ///< annotator queries never see each other
  pre_mv_pool,         ///< query outputs pooled into a single consensus prediction
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);  // throws ConfigError
const std::vector<Variant>& all_variants();

struct ModelConfig {
  std::size_t n_annotators = 1;
  std::size_t n_classes = 2;
  std::size_t feature_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t ffn_dim = 0;          ///< 0 selects 4 * hidden_dim
  std::size_t classifier_in = 0;    ///< output FC width; 0 selects hidden_dim
  std::size_t classifier_hidden = 32;
  std::size_t n_compression_queries = 32;
  std::size_t max_frames = 0;       ///< > 0 enables the frame (video) pipeline
  double ln_eps = 1e-5;
  Variant variant = Variant::full;

  void validate() const;  // throws ConfigError

  bool sequence_mode() const { return max_frames > 0; }
  std::size_t effective_ffn_dim() const { return ffn_dim ? ffn_dim : 4 * hidden_dim; }
  std::size_t effective_classifier_in() const {
    return variant == Variant::base ? feature_dim : (classifier_in ? classifier_in : hidden_dim);
  }
  /// Width of the keys the annotator queries attend to.
  std::size_t key_dim() const { return sequence_mode() ? hidden_dim : feature_dim; }
  /// Rows of the logits tensor: 1 for pre_mv_pool, n_annotators otherwise.
  std::size_t output_rows() const {
    return variant == Variant::pre_mv_pool ? 1 : n_annotators;
  }
  std::size_t classifier_groups() const {
    return (variant == Variant::unified_classifier || variant == Variant::pre_mv_pool)
               ? 1
               : n_annotators;
  }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);  // rejects unknown keys

/// How a parameter is initialized and whether weight decay applies to it.
enum class ParamKind { weight, bias, norm_gain, norm_shift, query, position };

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;  // shares storage with the owning ModelParams
  ParamKind kind;
  bool decays() const { return kind == ParamKind::weight; }
};

template <class T>
struct AttentionParams {
  Tensor<T> norm_gamma, norm_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct BlockParams {
  std::optional<AttentionParams<T>> self_attn;
  AttentionParams<T> cross_attn;
  Tensor<T> ffn_norm_gamma, ffn_norm_beta;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <class T>
struct QFormerParams {
  Tensor<T> queries;  // [n_queries, hidden]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_norm_gamma, final_norm_beta;
};

/// Grouped two-layer MLP: group g maps row g of its input. One group means a
/// classifier shared by every row.
template <class T>
struct ClassifierParams {
  Tensor<T> w1, b1;  // [G, in, hidden], [G, hidden]
  Tensor<T> w2, b2;  // [G, hidden, C], [G, C]
};

template <class T>
struct ModelParams {
  std::optional<QFormerParams<T>> frame_qformer;      // sequence mode only
  Tensor<T> frame_position;                           // [max_frames, hidden], sequence mode only
  std::optional<QFormerParams<T>> annotator_qformer;  // absent for Variant::base
  Tensor<T> output_fc_w, output_fc_b;                 // absent for Variant::base
  ClassifierParams<T> classifier;

  /// Every parameter exactly once, in canonical (checkpoint / optimizer) order.
  std::vector<NamedParam<T>> named() const;
  /// The parameter members themselves, same order as named(); lets callers
  /// swap a tensor (e.g. for gradient checks against one parameter).
  std::vector<Tensor<T>*> slots();

  template <class U>
  ModelParams<U> cast() const;
  ModelParams clone() const { return cast<T>(); }
};

template <class T>
std::size_t count_parameters(const ModelParams<T>& params);

/// Builds zeroed parameters with the shapes implied by config (no randomness).
template <class T>
ModelParams<T> allocate_model(const ModelConfig& config);

/// Truncated-normal(0, 0.02) weights clipped at +-2 sigma, zero biases, unit
/// layer-norm gains, zero frame position embedding. Deterministic in seed.
template <class T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Cross- and self-attention weights captured during one forward pass.
struct AttentionRecord {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t n_queries = 0;
  std::size_t n_keys = 0;
  std::size_t n_frames = 0;        // sequence mode: keys are n_frames blocks
  std::size_t keys_per_frame = 0;  // of keys_per_frame compressed tokens
  std::vector<std::vector<double>> cross;  // per block: [batch, heads, n_queries, n_keys]
  std::vector<std::vector<double>> self;   // per block: [batch, heads, n_queries, n_queries]

  std::size_t n_blocks() const { return cross.size(); }
  std::span<const double> cross_row(std::size_t block, std::size_t sample, std::size_t head,
                                    std::size_t query) const;
  std::span<const double> self_row(std::size_t block, std::size_t sample, std::size_t head,
                                   std::size_t query) const;
  /// Cross-attention mass per frame (sum over that frame's compressed keys).
  std::vector<double> frame_mass(std::size_t block, std::size_t sample, std::size_t head,
                                 std::size_t query) const;
};

/// features: [P, F] for one sample or [B, P, F]. Returns logits [B, rows, C]
/// where rows = config.output_rows().
template <class T>
Tensor<T> forward_image(Tape<T>& tape, const Tensor<T>& features, const ModelParams<T>& params,
                        const ModelConfig& config, AttentionRecord* record = nullptr);

/// frames: [T, P, F] for one sample or [B, T, P, F], T <= max_frames.
template <class T>
Tensor<T> forward_sequence(Tape<T>& tape, const Tensor<T>& frames, const ModelParams<T>& params,
                           const ModelConfig& config, AttentionRecord* record = nullptr);

/// Runs only the frame compressor: [B, T, P, F] -> keys [B, T * n_compression_queries, hidden]
/// with the frame position embedding already added.
template <class T>
Tensor<T> compress_frames(Tape<T>& tape, const Tensor<T>& frames, const ModelParams<T>& params,
                          const ModelConfig& config);

/// Sum over annotators with an observed label of the per-annotator cross
/// entropy, averaged over the samples of the batch. labels holds
/// rows-per-sample entries per sample; negative entries are unobserved.
/// Throws EmptyLossError when no label is observed.
template <class T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int64_t> labels);

/// Argmax over the class axis of logits [B, rows, C] -> B*rows class indices
/// (lowest index wins ties).
template <class T>
std::vector<std::int64_t> predict_classes(const Tensor<T>& logits);

}  // namespace qumab::model

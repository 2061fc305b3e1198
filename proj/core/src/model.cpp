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
#include "qumab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "qumab/errors.hpp"
#include "qumab/ops.hpp"

namespace qumab::model {

namespace {

constexpr std::pair<Variant, std::string_view> kVariantNames[] = {
    {Variant::full, "full"},
    {Variant::base, "base"},
    {Variant::unified_classifier, "unified_classifier"},
    {Variant::no_self_attn, "no_self_attn"},
    {Variant::pre_mv_pool, "pre_mv_pool"},
};

}  // namespace

std::string_view to_string(Variant v) {
  for (const auto& [variant, name] : kVariantNames) {
    if (variant == v) return name;
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (const auto& [variant, n] : kVariantNames) {
    if (n == name) return variant;
  }
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::full, Variant::base, Variant::unified_classifier,
                                         Variant::no_self_attn, Variant::pre_mv_pool};
  return v;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_annotators < 1) fail("n_annotators must be >= 1");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (hidden_dim % n_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (classifier_hidden < 1) fail("classifier_hidden must be >= 1");
  if (sequence_mode() && n_compression_queries < 1) fail("n_compression_queries must be >= 1");
  if (!(ln_eps > 0)) fail("ln_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_annotators", c.n_annotators},
                     {"n_classes", c.n_classes},
                     {"feature_dim", c.feature_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"n_heads", c.n_heads},
                     {"n_blocks", c.n_blocks},
                     {"ffn_dim", c.ffn_dim},
                     {"classifier_in", c.classifier_in},
                     {"classifier_hidden", c.classifier_hidden},
                     {"n_compression_queries", c.n_compression_queries},
                     {"max_frames", c.max_frames},
                     {"ln_eps", c.ln_eps},
                     {"variant", std::string(to_string(c.variant))}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig out;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_annotators") out.n_annotators = value.get<std::size_t>();
      else if (key == "n_classes") out.n_classes = value.get<std::size_t>();
      else if (key == "feature_dim") out.feature_dim = value.get<std::size_t>();
      else if (key == "hidden_dim") out.hidden_dim = value.get<std::size_t>();
      else if (key == "n_heads") out.n_heads = value.get<std::size_t>();
      else if (key == "n_blocks") out.n_blocks = value.get<std::size_t>();
      else if (key == "ffn_dim") out.ffn_dim = value.get<std::size_t>();
      else if (key == "classifier_in") out.classifier_in = value.get<std::size_t>();
      else if (key == "classifier_hidden") out.classifier_hidden = value.get<std::size_t>();
      else if (key == "n_compression_queries") out.n_compression_queries = value.get<std::size_t>();
      else if (key == "max_frames") out.max_frames = value.get<std::size_t>();
      else if (key == "ln_eps") out.ln_eps = value.get<double>();
      else if (key == "variant") out.variant = parse_variant(value.get<std::string>());
      else throw ConfigError("model config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config: bad value for '" + key + "': " + e.what());
    }
  }
  c = out;
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

// Visits every parameter of an attention/Q-Former block in canonical order as
// f(name, tensor, kind); A and Q may be const or mutable.
template <class A, class F>
void visit_attention(A& a, const std::string& prefix, F&& f) {
  f(prefix + ".norm.gamma", a.norm_gamma, ParamKind::norm_gain);
  f(prefix + ".norm.beta", a.norm_beta, ParamKind::norm_shift);
  f(prefix + ".wq", a.wq, ParamKind::weight);
  f(prefix + ".bq", a.bq, ParamKind::bias);
  f(prefix + ".wk", a.wk, ParamKind::weight);
  f(prefix + ".bk", a.bk, ParamKind::bias);
  f(prefix + ".wv", a.wv, ParamKind::weight);
  f(prefix + ".bv", a.bv, ParamKind::bias);
  f(prefix + ".wo", a.wo, ParamKind::weight);
  f(prefix + ".bo", a.bo, ParamKind::bias);
}

template <class Q, class F>
void visit_qformer(Q& q, const std::string& prefix, F&& f) {
  f(prefix + ".queries", q.queries, ParamKind::query);
  for (std::size_t i = 0; i < q.blocks.size(); ++i) {
    auto& b = q.blocks[i];
    const auto bp = prefix + ".blocks." + std::to_string(i);
    if (b.self_attn) visit_attention(*b.self_attn, bp + ".self_attn", f);
    visit_attention(b.cross_attn, bp + ".cross_attn", f);
    f(bp + ".ffn.norm.gamma", b.ffn_norm_gamma, ParamKind::norm_gain);
    f(bp + ".ffn.norm.beta", b.ffn_norm_beta, ParamKind::norm_shift);
    f(bp + ".ffn.w1", b.ffn_w1, ParamKind::weight);
    f(bp + ".ffn.b1", b.ffn_b1, ParamKind::bias);
    f(bp + ".ffn.w2", b.ffn_w2, ParamKind::weight);
    f(bp + ".ffn.b2", b.ffn_b2, ParamKind::bias);
  }
  f(prefix + ".final_norm.gamma", q.final_norm_gamma, ParamKind::norm_gain);
  f(prefix + ".final_norm.beta", q.final_norm_beta, ParamKind::norm_shift);
}

template <class P, class F>
void visit_params(P& p, F&& f) {
  if (p.frame_qformer) {
    visit_qformer(*p.frame_qformer, "frame_qformer", f);
    f("frame_position", p.frame_position, ParamKind::position);
  }
  if (p.annotator_qformer) {
    visit_qformer(*p.annotator_qformer, "annotator_qformer", f);
    f("output_fc.w", p.output_fc_w, ParamKind::weight);
    f("output_fc.b", p.output_fc_b, ParamKind::bias);
  }
  f("classifier.w1", p.classifier.w1, ParamKind::weight);
  f("classifier.b1", p.classifier.b1, ParamKind::bias);
  f("classifier.w2", p.classifier.w2, ParamKind::weight);
  f("classifier.b2", p.classifier.b2, ParamKind::bias);
}

template <class T>
Tensor<T> zeros(nk::Shape s) {
  return Tensor<T>::zeros(std::move(s), true);
}

template <class T>
AttentionParams<T> make_attention(std::size_t hidden, std::size_t key_dim) {
  AttentionParams<T> a;
  a.norm_gamma = zeros<T>({hidden});
  a.norm_beta = zeros<T>({hidden});
  a.wq = zeros<T>({hidden, hidden});
  a.bq = zeros<T>({hidden});
  a.wk = zeros<T>({key_dim, hidden});
  a.bk = zeros<T>({hidden});
  a.wv = zeros<T>({key_dim, hidden});
  a.bv = zeros<T>({hidden});
  a.wo = zeros<T>({hidden, hidden});
  a.bo = zeros<T>({hidden});
  return a;
}

template <class T>
QFormerParams<T> make_qformer(const ModelConfig& c, std::size_t n_queries, std::size_t key_dim,
                              bool self_attention) {
  QFormerParams<T> q;
  const auto h = c.hidden_dim, f = c.effective_ffn_dim();
  q.queries = zeros<T>({n_queries, h});
  for (std::size_t i = 0; i < c.n_blocks; ++i) {
    BlockParams<T> b;
    if (self_attention) b.self_attn = make_attention<T>(h, h);
    b.cross_attn = make_attention<T>(h, key_dim);
    b.ffn_norm_gamma = zeros<T>({h});
    b.ffn_norm_beta = zeros<T>({h});
    b.ffn_w1 = zeros<T>({h, f});
    b.ffn_b1 = zeros<T>({f});
    b.ffn_w2 = zeros<T>({f, h});
    b.ffn_b2 = zeros<T>({h});
    q.blocks.push_back(std::move(b));
  }
  q.final_norm_gamma = zeros<T>({h});
  q.final_norm_beta = zeros<T>({h});
  return q;
}

template <class T, class U>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  return t.defined() ? t.template cast<U>(t.requires_grad()) : Tensor<U>();
}

template <class T, class U>
AttentionParams<U> cast_attention(const AttentionParams<T>& a) {
  return {cast_tensor<T, U>(a.norm_gamma), cast_tensor<T, U>(a.norm_beta),
          cast_tensor<T, U>(a.wq), cast_tensor<T, U>(a.bq), cast_tensor<T, U>(a.wk),
          cast_tensor<T, U>(a.bk), cast_tensor<T, U>(a.wv), cast_tensor<T, U>(a.bv),
          cast_tensor<T, U>(a.wo), cast_tensor<T, U>(a.bo)};
}

template <class T, class U>
QFormerParams<U> cast_qformer(const QFormerParams<T>& q) {
  QFormerParams<U> out;
  out.queries = cast_tensor<T, U>(q.queries);
  for (const auto& b : q.blocks) {
    BlockParams<U> nb;
    if (b.self_attn) nb.self_attn = cast_attention<T, U>(*b.self_attn);
    nb.cross_attn = cast_attention<T, U>(b.cross_attn);
    nb.ffn_norm_gamma = cast_tensor<T, U>(b.ffn_norm_gamma);
    nb.ffn_norm_beta = cast_tensor<T, U>(b.ffn_norm_beta);
    nb.ffn_w1 = cast_tensor<T, U>(b.ffn_w1);
    nb.ffn_b1 = cast_tensor<T, U>(b.ffn_b1);
    nb.ffn_w2 = cast_tensor<T, U>(b.ffn_w2);
    nb.ffn_b2 = cast_tensor<T, U>(b.ffn_b2);
    out.blocks.push_back(std::move(nb));
  }
  out.final_norm_gamma = cast_tensor<T, U>(q.final_norm_gamma);
  out.final_norm_beta = cast_tensor<T, U>(q.final_norm_beta);
  return out;
}

}  // namespace

template <class T>
std::vector<NamedParam<T>> ModelParams<T>::named() const {
  std::vector<NamedParam<T>> out;
  visit_params(*this, [&out](const std::string& name, const Tensor<T>& t, ParamKind kind) {
    out.push_back({name, t, kind});
  });
  return out;
}

template <class T>
std::vector<Tensor<T>*> ModelParams<T>::slots() {
  std::vector<Tensor<T>*> out;
  visit_params(*this, [&out](const std::string&, Tensor<T>& t, ParamKind) { out.push_back(&t); });
  return out;
}

template <class T>
template <class U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  if (frame_qformer) out.frame_qformer = cast_qformer<T, U>(*frame_qformer);
  out.frame_position = cast_tensor<T, U>(frame_position);
  if (annotator_qformer) out.annotator_qformer = cast_qformer<T, U>(*annotator_qformer);
  out.output_fc_w = cast_tensor<T, U>(output_fc_w);
  out.output_fc_b = cast_tensor<T, U>(output_fc_b);
  out.classifier = {cast_tensor<T, U>(classifier.w1), cast_tensor<T, U>(classifier.b1),
                    cast_tensor<T, U>(classifier.w2), cast_tensor<T, U>(classifier.b2)};
  return out;
}

template <class T>
std::size_t count_parameters(const ModelParams<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params.named()) n += p.tensor.numel();
  return n;
}

template <class T>
ModelParams<T> allocate_model(const ModelConfig& config) {
  config.validate();
  ModelParams<T> p;
  const auto h = config.hidden_dim;
  if (config.sequence_mode()) {
    p.frame_qformer =
        make_qformer<T>(config, config.n_compression_queries, config.feature_dim, true);
    p.frame_position = zeros<T>({config.max_frames, h});
  }
  if (config.variant != Variant::base) {
    p.annotator_qformer = make_qformer<T>(config, config.n_annotators, config.key_dim(),
                                          config.variant != Variant::no_self_attn);
    p.output_fc_w = zeros<T>({h, config.effective_classifier_in()});
    p.output_fc_b = zeros<T>({config.effective_classifier_in()});
  }
  const auto g = config.classifier_groups();
  const auto cin = config.effective_classifier_in();
  const auto ch = config.classifier_hidden;
  p.classifier.w1 = zeros<T>({g, cin, ch});
  p.classifier.b1 = zeros<T>({g, ch});
  p.classifier.w2 = zeros<T>({g, ch, config.n_classes});
  p.classifier.b2 = zeros<T>({g, config.n_classes});
  return p;
}

template <class T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  auto params = allocate_model<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kStd = 0.02;
  auto truncated = [&] {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    return z * kStd;
  };
  for (auto& p : params.named()) {
    auto data = p.tensor.mutable_data();
    switch (p.kind) {
      case ParamKind::weight:
      case ParamKind::query:
        for (auto& v : data) v = static_cast<T>(truncated());
        break;
      case ParamKind::norm_gain:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case ParamKind::bias:
      case ParamKind::norm_shift:
      case ParamKind::position:
        std::fill(data.begin(), data.end(), T(0));
        break;
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Attention record

std::span<const double> AttentionRecord::cross_row(std::size_t block, std::size_t sample,
                                                   std::size_t head, std::size_t query) const {
  if (block >= cross.size() || sample >= batch || head >= heads || query >= n_queries) {
    throw IndexError("attention record: cross row index out of range");
  }
  const auto off = ((sample * heads + head) * n_queries + query) * n_keys;
  return std::span<const double>(cross[block]).subspan(off, n_keys);
}

std::span<const double> AttentionRecord::self_row(std::size_t block, std::size_t sample,
                                                  std::size_t head, std::size_t query) const {
  if (block >= self.size() || sample >= batch || head >= heads || query >= n_queries) {
    throw IndexError("attention record: self row index out of range");
  }
  const auto off = ((sample * heads + head) * n_queries + query) * n_queries;
  return std::span<const double>(self[block]).subspan(off, n_queries);
}

std::vector<double> AttentionRecord::frame_mass(std::size_t block, std::size_t sample,
                                                std::size_t head, std::size_t query) const {
  if (n_frames == 0) throw ContractError("attention record has no frame structure");
  auto row = cross_row(block, sample, head, query);
  std::vector<double> mass(n_frames, 0.0);
  for (std::size_t t = 0; t < n_frames; ++t) {
    for (std::size_t i = 0; i < keys_per_frame; ++i) mass[t] += row[t * keys_per_frame + i];
  }
  return mass;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <class T>
Tensor<T> attention_sublayer(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>* memory,
                             const AttentionParams<T>& p, std::size_t heads, double eps,
                             std::vector<double>* capture) {
  auto h = nk::layer_norm(tape, x, p.norm_gamma, p.norm_beta, eps);
  const Tensor<T>& source = memory ? *memory : h;
  auto q = nk::split_heads(tape, nk::linear(tape, h, p.wq, p.bq), heads);
  auto k = nk::split_heads(tape, nk::linear(tape, source, p.wk, p.bk), heads);
  auto v = nk::split_heads(tape, nk::linear(tape, source, p.wv, p.bv), heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  auto weights = nk::softmax_lastdim(tape, nk::bmm(tape, q, k, true, scale));
  if (capture) capture->assign(weights.data().begin(), weights.data().end());
  auto context = nk::merge_heads(tape, nk::bmm(tape, weights, v), heads);
  return nk::add(tape, x, nk::linear(tape, context, p.wo, p.bo));
}

template <class T>
Tensor<T> feed_forward(Tape<T>& tape, const Tensor<T>& x, const BlockParams<T>& b, double eps) {
  auto h = nk::layer_norm(tape, x, b.ffn_norm_gamma, b.ffn_norm_beta, eps);
  h = nk::gelu(tape, nk::linear(tape, h, b.ffn_w1, b.ffn_b1));
  return nk::add(tape, x, nk::linear(tape, h, b.ffn_w2, b.ffn_b2));
}

/// Queries attend to memory [B, M, Dk]; returns [B, n_queries, hidden].
template <class T>
Tensor<T> run_qformer(Tape<T>& tape, const QFormerParams<T>& q, const Tensor<T>& memory,
                      std::size_t heads, double eps, AttentionRecord* record) {
  auto x = nk::broadcast_batch(tape, q.queries, memory.dim(0));
  for (const auto& block : q.blocks) {
    if (block.self_attn) {
      std::vector<double>* cap = nullptr;
      if (record) cap = &record->self.emplace_back();
      x = attention_sublayer(tape, x, static_cast<const Tensor<T>*>(nullptr), *block.self_attn,
                             heads, eps, cap);
    }
    std::vector<double>* cap = nullptr;
    if (record) cap = &record->cross.emplace_back();
    x = attention_sublayer(tape, x, &memory, block.cross_attn, heads, eps, cap);
    x = feed_forward(tape, x, block, eps);
  }
  return nk::layer_norm(tape, x, q.final_norm_gamma, q.final_norm_beta, eps);
}

template <class T>
Tensor<T> classify(Tape<T>& tape, const Tensor<T>& reps, const ClassifierParams<T>& c) {
  const auto groups = c.w1.dim(0);
  if (groups == 1) {
    const auto in = c.w1.dim(1), hid = c.w1.dim(2), classes = c.w2.dim(2);
    auto h = nk::linear(tape, reps, c.w1.reshape({in, hid}), c.b1.reshape({hid}));
    h = nk::gelu(tape, h);
    return nk::linear(tape, h, c.w2.reshape({hid, classes}), c.b2.reshape({classes}));
  }
  auto h = nk::gelu(tape, nk::group_linear(tape, reps, c.w1, c.b1));
  return nk::group_linear(tape, h, c.w2, c.b2);
}

/// Annotator head over keys [B, M, key_dim] -> logits [B, rows, C].
template <class T>
Tensor<T> annotator_head(Tape<T>& tape, const Tensor<T>& keys, const ModelParams<T>& params,
                         const ModelConfig& config, AttentionRecord* record) {
  const auto batch = keys.dim(0);
  if (config.variant == Variant::base) {
    auto pooled = nk::mean_axis1(tape, keys);
    return classify(tape, nk::expand_middle(tape, pooled, config.n_annotators), params.classifier);
  }
  if (record) {
    record->batch = batch;
    record->heads = config.n_heads;
    record->n_queries = config.n_annotators;
    record->n_keys = keys.dim(1);
  }
  auto z = run_qformer(tape, *params.annotator_qformer, keys, config.n_heads, config.ln_eps,
                       record);
  if (config.variant == Variant::pre_mv_pool) {
    z = nk::mean_axis1(tape, z).reshape({batch, 1, config.hidden_dim});
  }
  z = nk::linear(tape, z, params.output_fc_w, params.output_fc_b);
  return classify(tape, z, params.classifier);
}

}  // namespace

template <class T>
Tensor<T> forward_image(Tape<T>& tape, const Tensor<T>& features, const ModelParams<T>& params,
                        const ModelConfig& config, AttentionRecord* record) {
  Tensor<T> batched = features;
  if (features.rank() == 2) batched = features.reshape({1, features.dim(0), features.dim(1)});
  if (batched.rank() != 3) {
    throw DimensionError("forward_image: features must be [P,F] or [B,P,F], got " +
                         nk::shape_str(features.shape()));
  }
  const auto expected = config.variant == Variant::base ? config.feature_dim : config.key_dim();
  if (batched.dim(2) != expected) {
    throw DimensionError("forward_image: feature_dim " + std::to_string(batched.dim(2)) +
                         " does not match model key width " + std::to_string(expected));
  }
  if (record) *record = AttentionRecord{};
  return annotator_head(tape, batched, params, config, record);
}

template <class T>
Tensor<T> compress_frames(Tape<T>& tape, const Tensor<T>& frames, const ModelParams<T>& params,
                          const ModelConfig& config) {
  if (!config.sequence_mode() || !params.frame_qformer) {
    throw ConfigError("compress_frames: model is not configured for sequences (max_frames = 0)");
  }
  Tensor<T> batched = frames;
  if (frames.rank() == 3) batched = frames.reshape({1, frames.dim(0), frames.dim(1), frames.dim(2)});
  if (batched.rank() != 4) {
    throw DimensionError("forward_sequence: frames must be [T,P,F] or [B,T,P,F], got " +
                         nk::shape_str(frames.shape()));
  }
  const auto batch = batched.dim(0), n_frames = batched.dim(1), patches = batched.dim(2);
  if (n_frames > config.max_frames) {
    throw ConfigError("forward_sequence: " + std::to_string(n_frames) + " frames exceed max_frames " +
                      std::to_string(config.max_frames));
  }
  if (batched.dim(3) != config.feature_dim) {
    throw DimensionError("forward_sequence: feature_dim " + std::to_string(batched.dim(3)) +
                         " does not match config " + std::to_string(config.feature_dim));
  }
  const auto nc = config.n_compression_queries, h = config.hidden_dim;
  auto flat = batched.reshape({batch * n_frames, patches, config.feature_dim});
  auto compressed =
      run_qformer(tape, *params.frame_qformer, flat, config.n_heads, config.ln_eps, nullptr);
  auto positioned = nk::add_frame_position(tape, compressed.reshape({batch, n_frames, nc, h}),
                                           params.frame_position);
  return positioned.reshape({batch, n_frames * nc, h});
}

template <class T>
Tensor<T> forward_sequence(Tape<T>& tape, const Tensor<T>& frames, const ModelParams<T>& params,
                           const ModelConfig& config, AttentionRecord* record) {
  if (record) *record = AttentionRecord{};
  if (config.variant == Variant::base) {
    // No Q-Former at all: pool raw patch features over every frame.
    Tensor<T> batched = frames.rank() == 3
                            ? frames.reshape({1, frames.dim(0), frames.dim(1), frames.dim(2)})
                            : frames;
    if (batched.rank() != 4) throw DimensionError("forward_sequence: bad frame tensor rank");
    if (batched.dim(1) > config.max_frames) {
      throw ConfigError("forward_sequence: frame count exceeds max_frames");
    }
    auto keys = batched.reshape({batched.dim(0), batched.dim(1) * batched.dim(2), batched.dim(3)});
    return forward_image(tape, keys, params, config, nullptr);
  }
  auto keys = compress_frames(tape, frames, params, config);
  auto logits = annotator_head(tape, keys, params, config, record);
  if (record) {
    record->keys_per_frame = config.n_compression_queries;
    record->n_frames = keys.dim(1) / config.n_compression_queries;
  }
  return logits;
}

template <class T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  if (logits.rank() != 3) throw DimensionError("total_loss: logits must be [B, rows, C]");
  const auto batch = logits.dim(0);
  return nk::masked_cross_entropy(tape, logits, labels, T(1) / static_cast<T>(batch));
}

template <class T>
std::vector<std::int64_t> predict_classes(const Tensor<T>& logits) {
  const auto classes = logits.shape().back();
  const auto rows = logits.numel() / classes;
  std::vector<std::int64_t> out(rows);
  const auto d = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = d.data() + r * classes;
    out[r] = std::max_element(z, z + classes) - z;
  }
  return out;
}

#define QUMAB_INSTANTIATE_MODEL(T)                                                             \
  template struct ModelParams<T>;                                                              \
  template std::size_t count_parameters(const ModelParams<T>&);                                \
  template ModelParams<T> allocate_model<T>(const ModelConfig&);                               \
  template ModelParams<T> init_model<T>(const ModelConfig&, std::uint64_t);                    \
  template Tensor<T> forward_image(Tape<T>&, const Tensor<T>&, const ModelParams<T>&,          \
                                   const ModelConfig&, AttentionRecord*);                      \
  template Tensor<T> forward_sequence(Tape<T>&, const Tensor<T>&, const ModelParams<T>&,       \
                                      const ModelConfig&, AttentionRecord*);                   \
  template Tensor<T> compress_frames(Tape<T>&, const Tensor<T>&, const ModelParams<T>&,        \
                                     const ModelConfig&);                                      \
  template Tensor<T> total_loss(Tape<T>&, const Tensor<T>&, std::span<const std::int64_t>);    \
  template std::vector<std::int64_t> predict_classes(const Tensor<T>&);

QUMAB_INSTANTIATE_MODEL(float)
QUMAB_INSTANTIATE_MODEL(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

}  // namespace qumab::model

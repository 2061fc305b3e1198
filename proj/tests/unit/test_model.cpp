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
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "qumab/errors.hpp"
#include "qumab/model.hpp"
#include "model_fixtures.hpp"

namespace {

using namespace qumab;
using model::ModelConfig;
using model::Variant;
using nk::Tape;
using nk::Tensor;
using support::permute_annotators;
using support::random_model;
using support::random_tensor;

ModelConfig small_config(Variant v = Variant::full) {
  ModelConfig c;
  c.n_annotators = 4;
  c.n_classes = 3;
  c.feature_dim = 6;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.classifier_hidden = 5;
  c.variant = v;
  return c;
}

// Parameter count by enumerating the architecture's pieces.
std::size_t closed_form_count(const ModelConfig& c) {
  const std::size_t h = c.hidden_dim, f = c.effective_ffn_dim();
  auto attention = [h](std::size_t dk) { return 2 * h + 2 * (h * h + h) + 2 * (dk * h + h); };
  auto qformer = [&](std::size_t nq, std::size_t dk, bool self) {
    const std::size_t ffn = 2 * h + h * f + f + f * h + h;
    return nq * h + c.n_blocks * ((self ? attention(h) : 0) + attention(dk) + ffn) + 2 * h;
  };
  std::size_t n = 0;
  if (c.sequence_mode()) n += qformer(c.n_compression_queries, c.feature_dim, true) + c.max_frames * h;
  const std::size_t cin = c.effective_classifier_in();
  if (c.variant != Variant::base) {
    n += qformer(c.n_annotators, c.key_dim(), c.variant != Variant::no_self_attn);
    n += h * cin + cin;
  }
  n += c.classifier_groups() * (cin * c.classifier_hidden + c.classifier_hidden +
                                c.classifier_hidden * c.n_classes + c.n_classes);
  return n;
}

TEST(ModelInit, DeterministicAndUnitGains) {
  auto c = small_config();
  auto a = model::init_model<float>(c, 5), b = model::init_model<float>(c, 5);
  auto na = a.named(), nb = b.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].name, nb[i].name);
    EXPECT_TRUE(std::equal(na[i].tensor.data().begin(), na[i].tensor.data().end(),
                           nb[i].tensor.data().begin()));
    if (na[i].kind == model::ParamKind::norm_gain) {
      for (float v : na[i].tensor.data()) EXPECT_EQ(v, 1.0f);
    }
  }
}

TEST(ModelInit, ParameterCountMatchesClosedForm) {
  ModelConfig c;
  c.n_annotators = 3;
  c.hidden_dim = 32;
  c.n_heads = 4;
  c.n_blocks = 2;
  // 2 blocks x (self 4288 + cross 4288 + ffn 8416) + queries 96 + final norm 64,
  // output FC 1056, three classifiers of 1122.
  EXPECT_EQ(model::count_parameters(model::init_model<float>(c, 0)), 38566u);
  for (auto v : model::all_variants()) {
    for (std::size_t frames : {0u, 3u}) {
      auto cv = small_config(v);
      cv.max_frames = frames;
      cv.n_compression_queries = 2;
      EXPECT_EQ(model::count_parameters(model::init_model<float>(cv, 0)), closed_form_count(cv))
          << model::to_string(v) << " frames " << frames;
    }
  }
}

TEST(ModelInit, EveryParameterNamedOnce) {
  auto c = small_config();
  c.max_frames = 2;
  auto p = model::init_model<float>(c, 1);
  auto named = p.named();
  std::vector<const void*> storages;
  std::vector<std::string> names;
  for (auto& n : named) {
    storages.push_back(n.tensor.storage().get());
    names.push_back(n.name);
  }
  std::sort(storages.begin(), storages.end());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(storages.begin(), storages.end()), storages.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  EXPECT_EQ(p.slots().size(), named.size());
}

TEST(ModelConfig, Validation) {
  auto c = small_config();
  c.hidden_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.n_classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(model::parse_variant("nope"), ConfigError);
  for (auto v : model::all_variants()) EXPECT_EQ(model::parse_variant(model::to_string(v)), v);
}

TEST(ModelConfig, JsonRoundTripRejectsUnknownKeys) {
  auto c = small_config(Variant::no_self_attn);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  j["bogus"] = 1;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
}

// --- Hand-rolled forward oracle -------------------------------------------

using Mat = std::vector<std::vector<double>>;

Mat to_mat(std::span<const double> d, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = d[offset + r * cols + c];
  return m;
}

std::vector<double> vec(const Tensor<double>& t, std::size_t offset = 0, std::size_t n = 0) {
  if (n == 0) n = t.numel();
  return std::vector<double>(t.data().begin() + offset, t.data().begin() + offset + n);
}

Mat affine(const Mat& x, const Mat& w, const std::vector<double>& b) {
  Mat y(x.size(), std::vector<double>(b.size()));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < b.size(); ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < w.size(); ++i) s += x[r][i] * w[i][o];
      y[r][o] = s;
    }
  return y;
}

Mat norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / row.size();
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

double gelu(double x) {
  return 0.5 * x * (1 + std::tanh(0.7978845608 * (x + 0.044715 * x * x * x)));
}

Mat attention(const Mat& x, const Mat* memory, const model::AttentionParams<double>& p,
              std::size_t heads, double eps) {
  const std::size_t h = x[0].size(), dk = memory ? (*memory)[0].size() : h;
  Mat hn = norm(x, vec(p.norm_gamma), vec(p.norm_beta), eps);
  const Mat& src = memory ? *memory : hn;
  Mat q = affine(hn, to_mat(p.wq.data(), h, h), vec(p.bq));
  Mat k = affine(src, to_mat(p.wk.data(), dk, h), vec(p.bk));
  Mat v = affine(src, to_mat(p.wv.data(), dk, h), vec(p.bv));
  const std::size_t dh = h / heads;
  Mat ctx(x.size(), std::vector<double>(h, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::vector<double> s(src.size());
      for (std::size_t j = 0; j < src.size(); ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < dh; ++e) dot += q[i][hd * dh + e] * k[j][hd * dh + e];
        s[j] = dot / std::sqrt(double(dh));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < src.size(); ++j)
        for (std::size_t e = 0; e < dh; ++e) ctx[i][hd * dh + e] += s[j] / z * v[j][hd * dh + e];
    }
  }
  Mat out = affine(ctx, to_mat(p.wo.data(), h, h), vec(p.bo));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < h; ++j) out[i][j] += x[i][j];
  return out;
}

Mat oracle_logits(const Mat& features, const model::ModelParams<double>& p, const ModelConfig& c) {
  const auto& q = *p.annotator_qformer;
  const std::size_t h = c.hidden_dim, f = c.effective_ffn_dim();
  Mat x = to_mat(q.queries.data(), c.n_annotators, h);
  for (const auto& b : q.blocks) {
    if (b.self_attn) x = attention(x, nullptr, *b.self_attn, c.n_heads, c.ln_eps);
    x = attention(x, &features, b.cross_attn, c.n_heads, c.ln_eps);
    Mat hn = norm(x, vec(b.ffn_norm_gamma), vec(b.ffn_norm_beta), c.ln_eps);
    Mat mid = affine(hn, to_mat(b.ffn_w1.data(), h, f), vec(b.ffn_b1));
    for (auto& r : mid)
      for (auto& v : r) v = gelu(v);
    Mat out = affine(mid, to_mat(b.ffn_w2.data(), f, h), vec(b.ffn_b2));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < h; ++j) x[i][j] += out[i][j];
  }
  x = norm(x, vec(q.final_norm_gamma), vec(q.final_norm_beta), c.ln_eps);
  const std::size_t cin = c.effective_classifier_in(), ch = c.classifier_hidden, nc = c.n_classes;
  x = affine(x, to_mat(p.output_fc_w.data(), h, cin), vec(p.output_fc_b));
  Mat logits;
  for (std::size_t k = 0; k < c.n_annotators; ++k) {
    Mat row{x[k]};
    Mat hid = affine(row, to_mat(p.classifier.w1.data(), cin, ch, k * cin * ch),
                     vec(p.classifier.b1, k * ch, ch));
    for (auto& v : hid[0]) v = gelu(v);
    logits.push_back(affine(hid, to_mat(p.classifier.w2.data(), ch, nc, k * ch * nc),
                            vec(p.classifier.b2, k * nc, nc))[0]);
  }
  return logits;
}

TEST(ForwardImage, MatchesHandRolledOracle) {
  ModelConfig c;
  c.n_annotators = 2;
  c.n_classes = 3;
  c.feature_dim = 5;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.n_blocks = 1;
  c.classifier_hidden = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = random_model<double>(c, seed);
    auto feats = random_tensor<double>({3, 5}, 100 + seed);
    Tape<double> tape(false);
    auto logits = model::forward_image(tape, feats, p, c);
    ASSERT_EQ(logits.shape(), (nk::Shape{1, 2, 3}));
    auto want = oracle_logits(to_mat(feats.data(), 3, 5), p, c);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(logits.data()[k * 3 + j], want[k][j], 1e-12);
  }
}

TEST(ForwardImage, FeatureDimMismatchIsDimensionError) {
  auto c = small_config();
  auto p = model::init_model<float>(c, 0);
  Tape<float> tape(false);
  EXPECT_THROW(model::forward_image(tape, random_tensor<float>({4, 7}, 0), p, c), DimensionError);
}

TEST(ForwardImage, SinglePatchForcesFullAttention) {
  auto c = small_config();
  auto p = random_model<float>(c, 2);
  model::AttentionRecord rec;
  Tape<float> tape(false);
  model::forward_image(tape, random_tensor<float>({1, 6}, 3), p, c, &rec);
  ASSERT_EQ(rec.n_keys, 1u);
  for (std::size_t b = 0; b < rec.n_blocks(); ++b)
    for (std::size_t hd = 0; hd < rec.heads; ++hd)
      for (std::size_t q = 0; q < rec.n_queries; ++q) EXPECT_EQ(rec.cross_row(b, 0, hd, q)[0], 1.0);
}

TEST(ForwardImage, AttentionRowsSumToOne) {
  for (auto v : model::all_variants()) {
    if (v == Variant::base) continue;
    auto c = small_config(v);
    auto p = random_model<float>(c, 4);
    model::AttentionRecord rec;
    Tape<float> tape(false);
    model::forward_image(tape, random_tensor<float>({3, 9, 6}, 5), p, c, &rec);
    EXPECT_EQ(rec.n_blocks(), c.n_blocks);
    EXPECT_EQ(rec.self.size(), v == Variant::no_self_attn ? 0u : c.n_blocks);
    for (std::size_t b = 0; b < rec.n_blocks(); ++b)
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t hd = 0; hd < rec.heads; ++hd)
          for (std::size_t q = 0; q < rec.n_queries; ++q) {
            auto row = rec.cross_row(b, s, hd, q);
            EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-5);
            if (!rec.self.empty()) {
              auto srow = rec.self_row(b, s, hd, q);
              EXPECT_NEAR(std::accumulate(srow.begin(), srow.end(), 0.0), 1.0, 1e-5);
            }
          }
  }
}

TEST(ForwardImage, AnnotatorPermutationEquivariance) {
  for (auto v : {Variant::full, Variant::unified_classifier, Variant::no_self_attn}) {
    auto c = small_config(v);
    auto p = random_model<float>(c, 6);
    std::vector<std::size_t> perm{2, 0, 3, 1};
    auto pp = permute_annotators(p, c, perm);
    auto feats = random_tensor<float>({2, 7, 6}, 7);
    Tape<float> tape(false);
    auto a = model::forward_image(tape, feats, p, c);
    auto b = model::forward_image(tape, feats, pp, c);
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t k = 0; k < c.n_annotators; ++k)
        for (std::size_t j = 0; j < c.n_classes; ++j) {
          EXPECT_NEAR(a.data()[(s * 4 + k) * 3 + j], b.data()[(s * 4 + perm[k]) * 3 + j], 1e-5)
              << model::to_string(v);
        }
  }
}

TEST(ForwardImage, NoSelfAttentionRowsAreBitExactlyIndependent) {
  auto c = small_config(Variant::no_self_attn);
  auto p = random_model<float>(c, 8);
  auto feats = random_tensor<float>({2, 5, 6}, 9);
  Tape<float> tape(false);
  auto base = model::forward_image(tape, feats, p, c);
  for (std::size_t k = 0; k < c.n_annotators; ++k) {
    auto q = p.clone();
    const std::size_t h = c.hidden_dim;
    for (std::size_t j = 0; j < h; ++j) q.annotator_qformer->queries.mutable_data()[k * h + j] += 0.75f;
    const std::size_t w1 = c.effective_classifier_in() * c.classifier_hidden;
    for (std::size_t j = 0; j < w1; ++j) q.classifier.w1.mutable_data()[k * w1 + j] *= -1.0f;
    auto out = model::forward_image(tape, feats, q, c);
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t r = 0; r < c.n_annotators; ++r) {
        const auto off = (s * c.n_annotators + r) * c.n_classes;
        const bool same = std::memcmp(base.data().data() + off, out.data().data() + off,
                                      c.n_classes * sizeof(float)) == 0;
        EXPECT_EQ(same, r != k) << "perturbed " << k << " row " << r;
      }
  }
}

TEST(ForwardImage, SelfAttentionCouplesAnnotators) {
  auto c = small_config(Variant::full);
  auto p = random_model<float>(c, 8);
  auto feats = random_tensor<float>({1, 5, 6}, 9);
  Tape<float> tape(false);
  auto base = model::forward_image(tape, feats, p, c);
  auto q = p.clone();
  q.annotator_qformer->queries.mutable_data()[0] += 0.75f;
  auto out = model::forward_image(tape, feats, q, c);
  EXPECT_NE(std::memcmp(base.data().data() + 3, out.data().data() + 3, 3 * sizeof(float)), 0);
}

TEST(ForwardImage, VariantShapes) {
  auto feats = random_tensor<float>({2, 5, 6}, 1);
  for (auto v : model::all_variants()) {
    auto c = small_config(v);
    auto p = model::init_model<float>(c, 0);
    Tape<float> tape(false);
    auto logits = model::forward_image(tape, feats, p, c);
    EXPECT_EQ(logits.shape(), (nk::Shape{2, c.output_rows(), 3})) << model::to_string(v);
    EXPECT_EQ(p.annotator_qformer.has_value(), v != Variant::base);
  }
}

TEST(ForwardImage, BaseIsMeanPoolIntoClassifiers) {
  auto c = small_config(Variant::base);
  auto p = random_model<double>(c, 3);
  auto feats = random_tensor<double>({4, 6}, 2);
  Tape<double> tape(false);
  auto logits = model::forward_image(tape, feats, p, c);
  std::vector<double> pooled(6, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) pooled[j] += feats.data()[i * 6 + j] / 4;
  const std::size_t ch = c.classifier_hidden;
  for (std::size_t k = 0; k < c.n_annotators; ++k) {
    Mat hid = affine({pooled}, to_mat(p.classifier.w1.data(), 6, ch, k * 6 * ch), vec(p.classifier.b1, k * ch, ch));
    for (auto& v : hid[0]) v = gelu(v);
    auto want = affine(hid, to_mat(p.classifier.w2.data(), ch, 3, k * ch * 3), vec(p.classifier.b2, k * 3, 3))[0];
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(logits.data()[k * 3 + j], want[j], 1e-12);
  }
}

ModelConfig sequence_config(Variant v = Variant::full) {
  auto c = small_config(v);
  c.max_frames = 4;
  c.n_compression_queries = 3;
  return c;
}

TEST(ForwardSequence, SingleFrameIsImageHeadOverCompressedKeys) {
  auto c = sequence_config();
  auto p = random_model<double>(c, 10);
  auto frames = random_tensor<double>({2, 1, 5, 6}, 11);
  Tape<double> tape(false);
  auto seq = model::forward_sequence(tape, frames, p, c);
  auto keys = model::compress_frames(tape, frames, p, c);
  EXPECT_EQ(keys.shape(), (nk::Shape{2, 3, 8}));
  auto img = model::forward_image(tape, keys, p, c);
  ASSERT_EQ(seq.numel(), img.numel());
  EXPECT_EQ(std::memcmp(seq.data().data(), img.data().data(), seq.numel() * sizeof(double)), 0);
}

TEST(ForwardSequence, FrameMassSumsToOne) {
  auto c = sequence_config();
  auto p = random_model<float>(c, 12);
  model::AttentionRecord rec;
  Tape<float> tape(false);
  model::forward_sequence(tape, random_tensor<float>({2, 3, 5, 6}, 13), p, c, &rec);
  EXPECT_EQ(rec.n_frames, 3u);
  EXPECT_EQ(rec.keys_per_frame, 3u);
  for (std::size_t b = 0; b < rec.n_blocks(); ++b)
    for (std::size_t hd = 0; hd < rec.heads; ++hd)
      for (std::size_t q = 0; q < rec.n_queries; ++q) {
        auto m = rec.frame_mass(b, 1, hd, q);
        EXPECT_NEAR(std::accumulate(m.begin(), m.end(), 0.0), 1.0, 1e-5);
      }
}

TEST(ForwardSequence, FrameOrderIrrelevantWithoutPositions) {
  auto c = sequence_config();
  auto p = random_model<double>(c, 14);
  std::fill(p.frame_position.mutable_data().begin(), p.frame_position.mutable_data().end(), 0.0);
  auto frames = random_tensor<double>({1, 4, 5, 6}, 15);
  const std::vector<std::size_t> order{3, 1, 0, 2};
  std::vector<double> shuffled(frames.numel());
  const std::size_t per = 5 * 6;
  for (std::size_t t = 0; t < 4; ++t)
    std::copy_n(frames.data().begin() + order[t] * per, per, shuffled.begin() + t * per);
  Tape<double> tape(false);
  auto a = model::forward_sequence(tape, frames, p, c);
  auto b = model::forward_sequence(tape, Tensor<double>(frames.shape(), shuffled), p, c);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);

  // With position codes the order matters.
  auto pp = random_model<double>(c, 14);
  auto x = model::forward_sequence(tape, frames, pp, c);
  auto y = model::forward_sequence(tape, Tensor<double>(frames.shape(), shuffled), pp, c);
  double diff = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) diff += std::abs(x.data()[i] - y.data()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(ForwardSequence, TooManyFramesIsConfigError) {
  auto c = sequence_config();
  auto p = model::init_model<float>(c, 0);
  Tape<float> tape(false);
  EXPECT_THROW(model::forward_sequence(tape, random_tensor<float>({5, 5, 6}, 1), p, c), ConfigError);
}

TEST(TotalLoss, Examples) {
  Tape<double> tape;
  auto uniform = Tensor<double>::zeros({1, 2, 4});
  const std::vector<std::int64_t> both{1, 3};
  EXPECT_NEAR(model::total_loss(tape, uniform, both).item(), 2 * std::log(4.0), 1e-12);

  auto logits = random_tensor<double>({1, 3, 4}, 3);
  const std::vector<std::int64_t> labels{2, -1, 0};
  auto ce = [&](std::size_t row, std::int64_t target) {
    auto z = logits.data().subspan(row * 4, 4);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double v : z) s += std::exp(v - mx);
    return mx + std::log(s) - z[target];
  };
  EXPECT_NEAR(model::total_loss(tape, logits, labels).item(), ce(0, 2) + ce(2, 0), 1e-12);

  const std::vector<std::int64_t> all{0, 1, 3};
  EXPECT_NEAR(model::total_loss(tape, logits, all).item(), ce(0, 0) + ce(1, 1) + ce(2, 3), 1e-12);

  const std::vector<std::int64_t> none{-1, -1, -1};
  EXPECT_THROW(model::total_loss(tape, logits, none), EmptyLossError);
}

TEST(TotalLoss, MaskedAnnotatorGetsNoGradient) {
  auto c = small_config();
  auto p = random_model<double>(c, 20);
  for (auto& n : p.named()) n.tensor.set_requires_grad(true);
  Tape<double> tape;
  auto logits = model::forward_image(tape, random_tensor<double>({5, 6}, 1), p, c);
  const std::vector<std::int64_t> labels{1, -1, 2, 0};
  tape.backward(model::total_loss(tape, logits, labels));
  const std::size_t w1 = c.effective_classifier_in() * c.classifier_hidden;
  auto g = p.classifier.w1.grad();
  for (std::size_t j = 0; j < w1; ++j) EXPECT_EQ(g[w1 + j], 0.0);
  double other = 0;
  for (std::size_t j = 0; j < w1; ++j) other += std::abs(g[j]);
  EXPECT_GT(other, 0.0);
}

TEST(PredictClasses, LowestIndexWinsTies) {
  Tensor<float> logits({1, 2, 3}, {1, 1, 0, 0, 2, 2});
  EXPECT_EQ(model::predict_classes(logits), (std::vector<std::int64_t>{0, 1}));
}

}  // namespace

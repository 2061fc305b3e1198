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
#include <benchmark/benchmark.h>

#include <random>

#include "qumab/model.hpp"
#include "qumab/ops.hpp"

namespace {

using namespace qumab;

template <class T>
nk::Tensor<T> random_tensor(nk::Shape shape, std::uint64_t seed, bool grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return nk::Tensor<T>(std::move(shape), std::move(v), grad);
}

template <class T>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_tensor<T>({n, n}, 1), b = random_tensor<T>({n, n}, 2);
  nk::Tape<T> tape(false);
  for (auto _ : state) benchmark::DoNotOptimize(nk::matmul(tape, a, b).data().data());
  state.counters["flops"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK_TEMPLATE(BM_Gemm, float)->Arg(32)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK_TEMPLATE(BM_Gemm, double)->Arg(64)->Arg(256);

// Attention-shaped batched product: [B*H, Q, dh] x [B*H, K, dh]^T.
void BM_AttentionScores(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  auto q = random_tensor<float>({batch * 4, 12, 8}, 3), k = random_tensor<float>({batch * 4, 64, 8}, 4);
  nk::Tape<float> tape(false);
  for (auto _ : state) benchmark::DoNotOptimize(nk::bmm(tape, q, k, true).data().data());
}
BENCHMARK(BM_AttentionScores)->Arg(1)->Arg(32);

model::ModelConfig standard_config() {
  model::ModelConfig c;
  c.n_annotators = 12;
  c.n_classes = 4;
  c.feature_dim = 32;
  return c;
}

void BM_ForwardImage(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto c = standard_config();
  const auto p = model::init_model<float>(c, 0);
  const auto x = random_tensor<float>({batch, 64, 32}, 5);
  for (auto _ : state) {
    nk::Tape<float> tape(false);
    benchmark::DoNotOptimize(model::forward_image(tape, x, p, c).data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_ForwardImage)->Arg(1)->Arg(32);

// One optimizer-step worth of autodiff work: forward, loss, backward.
void BM_ForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto c = standard_config();
  auto p = model::init_model<float>(c, 0);
  const auto x = random_tensor<float>({batch, 64, 32}, 6);
  std::vector<std::int64_t> labels(batch * c.n_annotators);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int64_t>(i % 4);
  for (auto _ : state) {
    for (auto* t : p.slots()) t->zero_grad();
    nk::Tape<float> tape;
    auto loss = model::total_loss(tape, model::forward_image(tape, x, p, c), labels);
    tape.backward(loss);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(32);

}  // namespace

BENCHMARK_MAIN();

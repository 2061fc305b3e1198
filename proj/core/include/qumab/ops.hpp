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
#include <span>

#include "qumab/tape.hpp"
#include "qumab/tensor.hpp"

/// Differentiable operations over Tensor. Every op checks shapes, rejects
/// non-finite results with NumericError and records a backward rule on the
/// tape when any input requires a gradient. Reductions run sequentially in
/// row-major order, so results are bit-reproducible.
namespace qumab::nk {

// Feed-forward nonlinearity constants (tanh approximation of GELU).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608;
inline constexpr double kGeluCubic = 0.044715;

/// [m,k] x [k,n] -> [m,n].
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// x[..., in] * w[in, out] + bias[out]; bias may be an undefined Tensor.
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Batched product a[B,m,k] x b[B,k,n] (or b[B,n,k] with transpose_b), scaled by alpha.
template <class T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false,
              T alpha = T(1));

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Adds bias[d] to every last-dimension slice of x[..., d].
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

/// Elementwise product of equally shaped tensors.
template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Sum of all entries -> scalar.
template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Mean over the middle axis: [B,N,D] -> [B,D].
template <class T>
Tensor<T> mean_axis1(Tape<T>& tape, const Tensor<T>& x);

template <class T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& x);

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5);

template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

/// [B,N,H] -> [B*heads, N, H/heads].
template <class T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);

/// Inverse of split_heads: [B*heads, N, d] -> [B, N, heads*d].
template <class T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads);

/// Repeats x[N,D] along a new leading batch axis: -> [B,N,D].
template <class T>
Tensor<T> broadcast_batch(Tape<T>& tape, const Tensor<T>& x, std::size_t batch);

/// Repeats x[B,D] along a new middle axis: -> [B,N,D].
template <class T>
Tensor<T> expand_middle(Tape<T>& tape, const Tensor<T>& x, std::size_t n);

/// x[B,T,N,H] + pos[t,:] for every (b, n); pos is [max_frames, H] with max_frames >= T.
template <class T>
Tensor<T> add_frame_position(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos);

/// Per-group affine map: out[b,g,:] = x[b,g,:] * w[g] + bias[g].
template <class T>
Tensor<T> group_linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& bias);

/// -log softmax(logits)[target] for a single logits vector [C].
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::int64_t target);

/// weight * sum over rows r with targets[r] >= 0 of cross_entropy(logits[r], targets[r]).
/// logits is [..., C] with product(leading extents) == targets.size(); negative
/// targets mark unobserved rows, which contribute no loss and no gradient.
template <class T>
Tensor<T> masked_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                               std::span<const std::int64_t> targets, T weight = T(1));

}  // namespace qumab::nk

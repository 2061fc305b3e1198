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

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "qumab/tensor.hpp"

namespace qumab::nk {

/// Records differentiable operations in execution order and replays their
/// backward rules in reverse. Confined to one thread.
template <class T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<Storage<T>>;
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  /// True when an op over these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(StoragePtr output, BackwardFn fn) {
    output->requires_grad = true;
    nodes_.push_back(Node{std::move(output), std::move(fn)});
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
  /// Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    }
    std::vector<T> seed{T(1)};
    backward(loss, seed);
  }

  /// Vector-Jacobian product: propagates an arbitrary output cotangent.
  void backward(const Tensor<T>& output, std::span<const T> seed) {
    if (seed.size() != output.numel()) throw DimensionError("backward seed size mismatch");
    const auto& out_st = output.storage();
    bool on_tape = false;
    for (auto& n : nodes_) {
      n.output->grad.clear();
      on_tape = on_tape || n.output == out_st;
    }
    if (!on_tape) {
      throw ContractError("backward called on a tensor not produced by this tape");
    }
    out_st->ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) out_st->grad[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on any path to the output
      it->backward();
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    StoragePtr output;
    BackwardFn backward;
  };
  bool recording_;
  std::vector<Node> nodes_;
};

/// Zeroes (drops) the gradients of every tensor in the range.
template <class Range>
void reset_grads(Range& tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace qumab::nk

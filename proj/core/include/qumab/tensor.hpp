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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "qumab/errors.hpp"

namespace qumab::nk {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

template <class T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor. Copies are shallow: two Tensor values may share one
/// Storage, which is how reshape() keeps gradients flowing without a tape entry.
template <class T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : shape_(std::move(shape)), st_(std::make_shared<Storage<T>>()) {
    if (shape_.empty()) shape_ = {1};
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data.size()) {
      throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data.size()) + " elements");
    }
    st_->data = std::move(data);
    st_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(st_); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return st_ ? st_->data.size() : 0; }

  std::span<const T> data() const { return st_->data; }
  /// Direct write access; reserved for optimizers and test fixtures.
  std::span<T> mutable_data() { return st_->data; }

  bool requires_grad() const noexcept { return st_ && st_->requires_grad; }
  void set_requires_grad(bool on) { st_->requires_grad = on; }
  bool has_grad() const noexcept { return st_ && st_->grad.size() == st_->data.size(); }
  std::span<const T> grad() const { return st_->grad; }
  std::span<T> mutable_grad() {
    st_->ensure_grad();
    return st_->grad;
  }
  void zero_grad() {
    if (st_) st_->grad.clear();
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return st_->data[0];
  }

  /// View with a new shape over the same storage (data and gradient).
  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.st_ = st_;
    return out;
  }

  /// Deep copy detached from any gradient history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape_, st_->data, requires_grad);
  }

  template <class U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(st_->data.begin(), st_->data.end());
    return Tensor<U>(shape_, std::move(out), requires_grad);
  }

  bool all_finite() const {
    return std::all_of(st_->data.begin(), st_->data.end(), [](T v) { return std::isfinite(v); });
  }

  const std::shared_ptr<Storage<T>>& storage() const noexcept { return st_; }

 private:
  Shape shape_;
  std::shared_ptr<Storage<T>> st_;
};

}  // namespace qumab::nk

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
#include <cstring>
#include <vector>

#include "qumab/tape.hpp"
#include "qumab/tensor.hpp"

namespace qumab::nk {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_output = 0;  // row of the Jacobian holding the worst entry
  std::size_t worst_input = 0;   // column of the Jacobian holding the worst entry
  double analytic = 0.0;
  double numeric = 0.0;
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares the tape Jacobian of f at x against central differences
/// (f(x+h e_i) - f(x-h e_i)) / 2h, entry by entry.
///
/// f is invoked as f(Tape<U>&, const Tensor<U>&) -> Tensor<U>, and must accept
/// both U = T (the tape side) and U = double (the difference side): the
/// numeric Jacobian is always evaluated in 64-bit so that a 32-bit check
/// measures the 32-bit gradient, not float cancellation in the oracle.
/// Throws ContractError when h is outside [1e-6, 1e-2] or when two evaluations
/// of f at the same point disagree bitwise.
template <class T, class F>
GradCheckReport finite_diff_check_report(F&& f, const Tensor<T>& x, double h) {
  if (!(h >= 1e-6 && h <= 1e-2)) throw ContractError("finite_diff_check: h outside [1e-6, 1e-2]");

  // Analytic Jacobian, one backward pass per output entry.
  Tape<T> tape;
  Tensor<T> xin = x.clone(true);
  Tensor<T> y = f(tape, xin);
  const std::size_t n_in = x.numel();
  const std::size_t n_out = y.numel();
  std::vector<double> analytic(n_out * n_in, 0.0);
  if (y.storage() == xin.storage()) {
    for (std::size_t i = 0; i < n_in; ++i) analytic[i * n_in + i] = 1.0;
  } else if (y.requires_grad()) {
    std::vector<T> seed(n_out, T(0));
    for (std::size_t j = 0; j < n_out; ++j) {
      xin.zero_grad();
      seed[j] = T(1);
      tape.backward(y, seed);
      seed[j] = T(0);
      if (xin.has_grad()) {
        auto g = xin.grad();
        for (std::size_t i = 0; i < n_in; ++i) analytic[j * n_in + i] = static_cast<double>(g[i]);
      }
    }
  }

  auto eval = [&f](const Tensor<double>& point) {
    Tape<double> no_grad(false);
    Tensor<double> out = f(no_grad, point);
    return std::vector<double>(out.data().begin(), out.data().end());
  };
  Tensor<double> base = x.template cast<double>();
  const auto first = eval(base);
  const auto second = eval(base);
  if (first.size() != n_out ||
      std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) != 0) {
    throw ContractError("finite_diff_check: function is not deterministic");
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < n_in; ++i) {
    Tensor<double> plus = base.clone();
    Tensor<double> minus = base.clone();
    plus.mutable_data()[i] += h;
    minus.mutable_data()[i] -= h;
    const auto fp = eval(plus);
    const auto fm = eval(minus);
    for (std::size_t j = 0; j < n_out; ++j) {
      const double numeric = (fp[j] - fm[j]) / (2.0 * h);
      const double a = analytic[j * n_in + i];
      const double err = relative_error(a, numeric);
      if (err > report.max_rel_error) {
        report = GradCheckReport{err, j, i, a, numeric};
      }
    }
  }
  return report;
}

/// Maximum relative error between the tape Jacobian and central differences.
template <class T, class F>
double finite_diff_check(F&& f, const Tensor<T>& x, double h) {
  return finite_diff_check_report(std::forward<F>(f), x, h).max_rel_error;
}

}  // namespace qumab::nk

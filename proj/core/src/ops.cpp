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
#include "qumab/ops.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "kernels.hpp"

namespace qumab::nk {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <class T>
void require_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
Tensor<T> make_output(Shape shape, std::vector<T> data, const char* op) {
  require_finite(data, op);
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
Storage<T>* grad_target(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto* st = t.storage().get();
  st->ensure_grad();
  return st;
}

template <class T>
thread_local std::vector<T> g_scratch;

}  // namespace

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto result = make_output<T>({m, n}, std::move(out), "matmul");
  if (tape.needs_grad({&a, &b})) {
    auto os = result.storage();
    tape.record(os, [a, b, os, m, n, k] {
      if (auto* ga = grad_target(a)) {  // dA = dC * B^T
        detail::gemm_nt(m, k, n, os->grad.data(), b.data().data(), ga->grad.data(), true,
                        g_scratch<T>);
      }
      if (auto* gb = grad_target(b)) {  // dB = A^T * dC
        detail::gemm_tn(k, n, m, a.data().data(), os->grad.data(), gb->grad.data(), true);
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(w, 2, "linear");
  const auto in = w.dim(0), out_dim = w.dim(1);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined() && (bias.numel() != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const auto rows = x.numel() / in;
  std::vector<T> out(rows * out_dim);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * out_dim);
  }
  detail::gemm_nn(rows, out_dim, in, x.data().data(), w.data().data(), out.data(),
                  bias.defined());
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto result = make_output<T>(std::move(shape), std::move(out), "linear");
  if (tape.needs_grad({&x, &w, &bias})) {
    auto os = result.storage();
    tape.record(os, [x, w, bias, os, rows, in, out_dim] {
      const T* dy = os->grad.data();
      if (auto* gx = grad_target(x)) {
        detail::gemm_nt(rows, in, out_dim, dy, w.data().data(), gx->grad.data(), true,
                        g_scratch<T>);
      }
      if (auto* gw = grad_target(w)) {
        detail::gemm_tn(in, out_dim, rows, x.data().data(), dy, gw->grad.data(), true);
      }
      if (auto* gb = grad_target(bias)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_dim; ++j) gb->grad[j] += dy[r * out_dim + j];
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, T alpha) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  const auto bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    const T* ap = a.data().data() + i * m * k;
    const T* bp = b.data().data() + i * k * n;
    T* cp = out.data() + i * m * n;
    if (transpose_b) {
      detail::gemm_nt(m, n, k, ap, bp, cp, false, g_scratch<T>);
    } else {
      detail::gemm_nn(m, n, k, ap, bp, cp, false);
    }
  }
  if (alpha != T(1)) {
    for (auto& v : out) v *= alpha;
  }
  auto result = make_output<T>({batch, m, n}, std::move(out), "bmm");
  if (tape.needs_grad({&a, &b})) {
    auto os = result.storage();
    tape.record(os, [a, b, os, batch, m, n, k, transpose_b, alpha] {
      std::vector<T> dc(m * n);
      auto* ga = grad_target(a);
      auto* gb = grad_target(b);
      for (std::size_t i = 0; i < batch; ++i) {
        const T* src = os->grad.data() + i * m * n;
        for (std::size_t j = 0; j < m * n; ++j) dc[j] = src[j] * alpha;
        const T* ap = a.data().data() + i * m * k;
        const T* bp = b.data().data() + i * k * n;
        if (ga) {
          T* gap = ga->grad.data() + i * m * k;
          if (transpose_b) {  // B stored [n,k]: dA = dC * B
            detail::gemm_nn(m, k, n, dc.data(), bp, gap, true);
          } else {
            detail::gemm_nt(m, k, n, dc.data(), bp, gap, true, g_scratch<T>);
          }
        }
        if (gb) {
          T* gbp = gb->grad.data() + i * k * n;
          if (transpose_b) {  // dB[n,k] = dC^T * A
            detail::gemm_tn(n, k, m, dc.data(), ap, gbp, true);
          } else {
            detail::gemm_tn(k, n, m, ap, dc.data(), gbp, true);
          }
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto result = make_output<T>(a.shape(), std::move(out), "add");
  if (tape.needs_grad({&a, &b})) {
    auto os = result.storage();
    tape.record(os, [a, b, os] {
      for (const auto* t : {&a, &b}) {
        if (auto* g = grad_target(*t)) {
          for (std::size_t i = 0; i < os->grad.size(); ++i) g->grad[i] += os->grad[i];
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  const auto d = x.shape().back();
  if (bias.numel() != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const auto rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto xd = x.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] + bd[j];
  }
  auto result = make_output<T>(x.shape(), std::move(out), "add_bias");
  if (tape.needs_grad({&x, &bias})) {
    auto os = result.storage();
    tape.record(os, [x, bias, os, rows, d] {
      if (auto* gx = grad_target(x)) {
        for (std::size_t i = 0; i < os->grad.size(); ++i) gx->grad[i] += os->grad[i];
      }
      if (auto* gb = grad_target(bias)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gb->grad[j] += os->grad[r * d + j];
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto result = make_output<T>(x.shape(), std::move(out), "scale");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, factor] {
      auto* gx = grad_target(x);
      for (std::size_t i = 0; i < os->grad.size(); ++i) gx->grad[i] += os->grad[i] * factor;
    });
  }
  return result;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto result = make_output<T>(a.shape(), std::move(out), "mul");
  if (tape.needs_grad({&a, &b})) {
    auto os = result.storage();
    tape.record(os, [a, b, os] {
      const auto ad = a.data(), bd = b.data();
      // Both factors may alias one storage (x*x); each accumulates its own term.
      std::vector<T> da(os->grad.size()), db(os->grad.size());
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        da[i] = os->grad[i] * bd[i];
        db[i] = os->grad[i] * ad[i];
      }
      if (auto* ga = grad_target(a)) {
        for (std::size_t i = 0; i < da.size(); ++i) ga->grad[i] += da[i];
      }
      if (auto* gb = grad_target(b)) {
        for (std::size_t i = 0; i < db.size(); ++i) gb->grad[i] += db[i];
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto result = make_output<T>({1}, {acc}, "sum");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os] {
      auto* gx = grad_target(x);
      for (auto& g : gx->grad) g += os->grad[0];
    });
  }
  return result;
}

template <class T>
Tensor<T> mean_axis1(Tape<T>& tape, const Tensor<T>& x) {
  require_rank(x, 3, "mean_axis1");
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<T> out(batch * d, T(0));
  const auto xd = x.data();
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t b = 0; b < batch; ++b) {
    T* o = out.data() + b * d;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = xd.data() + (b * n + i) * d;
      for (std::size_t j = 0; j < d; ++j) o[j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
  }
  auto result = make_output<T>({batch, d}, std::move(out), "mean_axis1");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, batch, n, d, inv] {
      auto* gx = grad_target(x);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) gx->grad[(b * n + i) * d + j] += os->grad[b * d + j] * inv;
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& x) {
  const auto d = x.shape().back();
  const auto rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T* o = out.data() + r * d;
    T mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
  }
  auto result = make_output<T>(x.shape(), std::move(out), "softmax_lastdim");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, rows, d] {
      auto* gx = grad_target(x);
      const T* y = os->data.data();
      const T* dy = os->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * y[r * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          gx->grad[r * d + j] += y[r * d + j] * (dy[r * d + j] - dot);
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters do not match last dimension of " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const auto rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mean) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
    }
  }
  auto result = make_output<T>(x.shape(), std::move(out), "layer_norm");
  if (tape.needs_grad({&x, &gamma, &beta})) {
    auto os = result.storage();
    tape.record(os, [x, gamma, beta, os, rows, d, xhat = std::move(xhat),
                     rstd = std::move(rstd)] {
      const T* dy = os->grad.data();
      const auto gd = gamma.data();
      auto* gx = grad_target(x);
      auto* gg = grad_target(gamma);
      auto* gb = grad_target(beta);
      std::vector<T> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy + r * d;
        const T* xh = xhat.data() + r * d;
        if (gg) {
          for (std::size_t j = 0; j < d; ++j) gg->grad[j] += dyr[j] * xh[j];
        }
        if (gb) {
          for (std::size_t j = 0; j < d; ++j) gb->grad[j] += dyr[j];
        }
        if (gx) {
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dyr[j] * gd[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
          }
          mean_dxhat /= static_cast<T>(d);
          mean_dxhat_xhat /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx->grad[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T a = static_cast<T>(kGeluCubic);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xd[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  auto result = make_output<T>(x.shape(), std::move(out), "gelu");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, c, a] {
      auto* gx = grad_target(x);
      const auto xd = x.data();
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        const T v = xd[i];
        const T t = std::tanh(c * (v + a * v * v * v));
        const T deriv = T(0.5) * (T(1) + t) +
                        T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
        gx->grad[i] += os->grad[i] * deriv;
      }
    });
  }
  return result;
}

namespace {

// Index maps shared by split_heads / merge_heads: element (b, n, h*dh + e) of
// the merged layout lives at ((b*heads + h)*N + n)*dh + e in the split one.
template <class T>
void permute_heads(const T* src, T* dst, std::size_t batch, std::size_t n, std::size_t heads,
                   std::size_t dh, bool to_split, bool accumulate) {
  const std::size_t hidden = heads * dh;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t merged = (b * n + i) * hidden + h * dh;
        const std::size_t split = ((b * heads + h) * n + i) * dh;
        const T* s = src + (to_split ? merged : split);
        T* d = dst + (to_split ? split : merged);
        for (std::size_t e = 0; e < dh; ++e) {
          if (accumulate) {
            d[e] += s[e];
          } else {
            d[e] = s[e];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  require_rank(x, 3, "split_heads");
  const auto batch = x.dim(0), n = x.dim(1), hidden = x.dim(2);
  if (heads == 0 || hidden % heads != 0) {
    throw DimensionError("split_heads: hidden " + std::to_string(hidden) +
                         " not divisible by heads " + std::to_string(heads));
  }
  const auto dh = hidden / heads;
  std::vector<T> out(x.numel());
  permute_heads(x.data().data(), out.data(), batch, n, heads, dh, true, false);
  auto result = make_output<T>({batch * heads, n, dh}, std::move(out), "split_heads");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, batch, n, heads, dh] {
      auto* gx = grad_target(x);
      permute_heads(os->grad.data(), gx->grad.data(), batch, n, heads, dh, false, true);
    });
  }
  return result;
}

template <class T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: leading extent not divisible by heads");
  }
  const auto batch = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2);
  std::vector<T> out(x.numel());
  permute_heads(x.data().data(), out.data(), batch, n, heads, dh, false, false);
  auto result = make_output<T>({batch, n, heads * dh}, std::move(out), "merge_heads");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, batch, n, heads, dh] {
      auto* gx = grad_target(x);
      permute_heads(os->grad.data(), gx->grad.data(), batch, n, heads, dh, true, true);
    });
  }
  return result;
}

template <class T>
Tensor<T> broadcast_batch(Tape<T>& tape, const Tensor<T>& x, std::size_t batch) {
  require_rank(x, 2, "broadcast_batch");
  if (batch == 0) throw DimensionError("broadcast_batch: batch must be positive");
  const auto per = x.numel();
  std::vector<T> out(batch * per);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(x.data().begin(), x.data().end(), out.begin() + b * per);
  }
  auto result = make_output<T>({batch, x.dim(0), x.dim(1)}, std::move(out), "broadcast_batch");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, batch, per] {
      auto* gx = grad_target(x);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < per; ++i) gx->grad[i] += os->grad[b * per + i];
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> expand_middle(Tape<T>& tape, const Tensor<T>& x, std::size_t n) {
  require_rank(x, 2, "expand_middle");
  if (n == 0) throw DimensionError("expand_middle: extent must be positive");
  const auto batch = x.dim(0), d = x.dim(1);
  std::vector<T> out(batch * n * d);
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(xd.begin() + b * d, xd.begin() + (b + 1) * d, out.begin() + (b * n + i) * d);
    }
  }
  auto result = make_output<T>({batch, n, d}, std::move(out), "expand_middle");
  if (tape.needs_grad({&x})) {
    auto os = result.storage();
    tape.record(os, [x, os, batch, n, d] {
      auto* gx = grad_target(x);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) gx->grad[b * d + j] += os->grad[(b * n + i) * d + j];
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> add_frame_position(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& pos) {
  require_rank(x, 4, "add_frame_position");
  require_rank(pos, 2, "add_frame_position");
  const auto batch = x.dim(0), frames = x.dim(1), n = x.dim(2), hidden = x.dim(3);
  if (pos.dim(1) != hidden) throw DimensionError("add_frame_position: hidden size mismatch");
  if (frames > pos.dim(0)) {
    throw ConfigError("add_frame_position: " + std::to_string(frames) +
                      " frames exceed max_frames " + std::to_string(pos.dim(0)));
  }
  std::vector<T> out(x.numel());
  const auto xd = x.data(), pd = pos.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = ((b * frames + t) * n + i) * hidden;
        for (std::size_t j = 0; j < hidden; ++j) out[off + j] = xd[off + j] + pd[t * hidden + j];
      }
    }
  }
  auto result = make_output<T>(x.shape(), std::move(out), "add_frame_position");
  if (tape.needs_grad({&x, &pos})) {
    auto os = result.storage();
    tape.record(os, [x, pos, os, batch, frames, n, hidden] {
      if (auto* gx = grad_target(x)) {
        for (std::size_t i = 0; i < os->grad.size(); ++i) gx->grad[i] += os->grad[i];
      }
      if (auto* gp = grad_target(pos)) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = ((b * frames + t) * n + i) * hidden;
              for (std::size_t j = 0; j < hidden; ++j) gp->grad[t * hidden + j] += os->grad[off + j];
            }
          }
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> group_linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& bias) {
  require_rank(x, 3, "group_linear");
  require_rank(w, 3, "group_linear");
  const auto batch = x.dim(0), groups = x.dim(1), in = x.dim(2);
  const auto out_dim = w.dim(2);
  if (w.dim(0) != groups || w.dim(1) != in) {
    throw DimensionError("group_linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (bias.numel() != groups * out_dim) throw DimensionError("group_linear: bias size mismatch");
  std::vector<T> out(batch * groups * out_dim);
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = bias.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      T* o = out.data() + (b * groups + g) * out_dim;
      std::copy(bd + g * out_dim, bd + (g + 1) * out_dim, o);
      detail::gemm_nn(1, out_dim, in, xd + (b * groups + g) * in, wd + g * in * out_dim, o, true);
    }
  }
  auto result = make_output<T>({batch, groups, out_dim}, std::move(out), "group_linear");
  if (tape.needs_grad({&x, &w, &bias})) {
    auto os = result.storage();
    tape.record(os, [x, w, bias, os, batch, groups, in, out_dim] {
      auto* gx = grad_target(x);
      auto* gw = grad_target(w);
      auto* gb = grad_target(bias);
      const T* xd = x.data().data();
      const T* wd = w.data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t g = 0; g < groups; ++g) {
          const T* dy = os->grad.data() + (b * groups + g) * out_dim;
          if (gx) {
            detail::gemm_nt(1, in, out_dim, dy, wd + g * in * out_dim,
                            gx->grad.data() + (b * groups + g) * in, true, g_scratch<T>);
          }
          if (gw) {
            detail::gemm_tn(in, out_dim, 1, xd + (b * groups + g) * in, dy,
                            gw->grad.data() + g * in * out_dim, true);
          }
          if (gb) {
            for (std::size_t j = 0; j < out_dim; ++j) gb->grad[g * out_dim + j] += dy[j];
          }
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> masked_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                               std::span<const std::int64_t> targets, T weight) {
  const auto classes = logits.shape().back();
  const auto rows = logits.numel() / classes;
  if (rows != targets.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  const auto ld = logits.data();
  std::vector<T> probs(logits.numel(), T(0));
  T total = 0;
  std::size_t observed = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto target = targets[r];
    if (target < 0) continue;
    if (static_cast<std::size_t>(target) >= classes) {
      throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    ++observed;
    const T* z = ld.data() + r * classes;
    T mx = z[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, z[j]);
    T s = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      probs[r * classes + j] = std::exp(z[j] - mx);
      s += probs[r * classes + j];
    }
    for (std::size_t j = 0; j < classes; ++j) probs[r * classes + j] /= s;
    total += (std::log(s) + mx - z[target]);
  }
  if (observed == 0) throw EmptyLossError("cross_entropy: no observed label");
  auto result = make_output<T>({1}, {total * weight}, "cross_entropy");
  if (tape.needs_grad({&logits})) {
    auto os = result.storage();
    std::vector<std::int64_t> tg(targets.begin(), targets.end());
    tape.record(os, [logits, os, rows, classes, weight, probs = std::move(probs),
                     tg = std::move(tg)] {
      auto* gl = grad_target(logits);
      const T up = os->grad[0] * weight;
      for (std::size_t r = 0; r < rows; ++r) {
        if (tg[r] < 0) continue;
        for (std::size_t j = 0; j < classes; ++j) {
          const T onehot = (static_cast<std::int64_t>(j) == tg[r]) ? T(1) : T(0);
          gl->grad[r * classes + j] += up * (probs[r * classes + j] - onehot);
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::int64_t target) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy: expected logits of rank 1");
  if (target < 0 || static_cast<std::size_t>(target) >= logits.numel()) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.numel()) + ")");
  }
  const std::int64_t t[1] = {target};
  return masked_cross_entropy(tape, logits, std::span<const std::int64_t>(t, 1));
}

#define QUMAB_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> bmm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, bool, T);              \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> add_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                    \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mean_axis1(Tape<T>&, const Tensor<T>&);                                  \
  template Tensor<T> softmax_lastdim(Tape<T>&, const Tensor<T>&);                             \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                const Tensor<T>&, double);                                    \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> split_heads(Tape<T>&, const Tensor<T>&, std::size_t);                    \
  template Tensor<T> merge_heads(Tape<T>&, const Tensor<T>&, std::size_t);                    \
  template Tensor<T> broadcast_batch(Tape<T>&, const Tensor<T>&, std::size_t);                \
  template Tensor<T> expand_middle(Tape<T>&, const Tensor<T>&, std::size_t);                   \
  template Tensor<T> add_frame_position(Tape<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> group_linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                  const Tensor<T>&);                                          \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::int64_t);                 \
  template Tensor<T> masked_cross_entropy(Tape<T>&, const Tensor<T>&,                         \
                                          std::span<const std::int64_t>, T);

QUMAB_INSTANTIATE_OPS(float)
QUMAB_INSTANTIATE_OPS(double)

}  // namespace qumab::nk

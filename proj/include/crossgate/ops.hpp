/*
 * Copyright (c) 2026 The crossgate Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "crossgate/tensor.hpp"

namespace crossgate {

/// Label value skipped by cross_entropy.
inline constexpr int kIgnoreLabel = -1;

namespace detail {

template <class T>
Tape<T>* common_tape(std::string_view op, std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t || !t->tracked()) continue;
    if (!t->tape()->owns(*t))
      throw std::logic_error(std::string(op) + ": input handle is stale (tape was cleared)");
    if (tape && tape != t->tape()) throw std::logic_error(std::string(op) + ": inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <class T>
void check_finite(std::string_view op, const Tensor<T>& t) {
  if (!debug::finite_checks.load(std::memory_order_relaxed)) return;
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!std::isfinite(d[i]))
      throw NumericError(std::string(op) + ": non-finite input at flat index " + std::to_string(i));
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

// C[n,m] += A[n,k] * B[k,m]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  if constexpr (!std::is_same_v<T, double> && !std::is_same_v<T, float>) {
    // Register accumulators; extended types have no vector path.
    for (std::size_t i = 0; i < n; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * m;
      std::size_t j = 0;
      for (; j + 4 <= m; j += 4) {
        T s0 = ci[j], s1 = ci[j + 1], s2 = ci[j + 2], s3 = ci[j + 3];
        for (std::size_t p = 0; p < k; ++p) {
          const T x = ai[p];
          const T* bp = b + p * m + j;
          s0 += x * bp[0];
          s1 += x * bp[1];
          s2 += x * bp[2];
          s3 += x * bp[3];
        }
        ci[j] = s0;
        ci[j + 1] = s1;
        ci[j + 2] = s2;
        ci[j + 3] = s3;
      }
      for (; j < m; ++j) {
        T s = ci[j];
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * b[p * m + j];
        ci[j] = s;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[n,k] += G[n,m] * B[k,m]^T
template <class T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      T s = 0;
      const T* gi = g + i * m;
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
      c[i * k + p] += s;
    }
}

// C[k,m] += A[n,k]^T * G[n,m]
template <class T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* gi = g + i * m;
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * gi[j];
    }
}

// Broadcast plan for binary elementwise ops: `small` is repeated over the
// leading axes of `big`, or is a scalar.
struct Broadcast {
  bool swapped = false;
  std::size_t inner = 0;  // numel of the smaller operand
};

inline Broadcast plan_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return {false, b.numel()};
  if (b.rank() == 0 || a.has_suffix(b)) return {false, b.numel()};
  if (a.rank() == 0 || b.has_suffix(a)) return {true, a.numel()};
  shape_mismatch(op, a, b);
}

}  // namespace detail

/// Matrix product over the last two axes. `b` is either rank 2 (shared by
/// every leading index of `a`) or has the same leading extents as `a`.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "matmul";
  if (a.rank() < 2 || b.rank() < 2) detail::shape_mismatch(op, a.shape(), b.shape());
  const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), m = b.dim(b.rank() - 1);
  if (k != k2) detail::shape_mismatch(op, a.shape(), b.shape());
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (b.rank() != a.rank()) detail::shape_mismatch(op, a.shape(), b.shape());
    for (std::size_t i = 0; i + 2 < a.rank(); ++i)
      if (a.dim(i) != b.dim(i)) detail::shape_mismatch(op, a.shape(), b.shape());
  }
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  const std::size_t batch = a.numel() / (n * k);
  auto dims = a.shape().dims();
  dims.back() = m;
  Tensor<T> out{Shape(dims)};
  auto* c = out.mutable_data().data();
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t s = 0; s < batch; ++s)
    detail::gemm_nn(ad + s * n * k, bd + (shared_b ? 0 : s * k * m), c + s * n * m, n, k, m);

  auto* tape = detail::common_tape<T>(op, {&a, &b});
  if (!tape) return out;
  auto abuf = a.buffer(), bbuf = b.buffer();
  return tape->record(OpKind::matmul, {&a, &b}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        for (std::size_t s = 0; s < batch; ++s) {
                          const T* gs = g.data() + s * n * m;
                          if (gin[0]) detail::gemm_nt(gs, bbuf->data() + (shared_b ? 0 : s * k * m), gin[0]->data() + s * n * k, n, k, m);
                          if (gin[1]) detail::gemm_tn(abuf->data() + s * n * k, gs, gin[1]->data() + (shared_b ? 0 : s * k * m), n, k, m);
                        }
                      });
}

/// Elementwise sum; the smaller operand may be a scalar or match the
/// trailing axes of the larger.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "add";
  const auto plan = detail::plan_broadcast(op, a.shape(), b.shape());
  const Tensor<T>& big = plan.swapped ? b : a;
  const Tensor<T>& small = plan.swapped ? a : b;
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  Tensor<T> out(big.shape());
  auto o = out.mutable_data();
  const auto x = big.data(), y = small.data();
  const std::size_t inner = plan.inner;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i % inner];

  auto* tape = detail::common_tape<T>(op, {&a, &b});
  if (!tape) return out;
  return tape->record(OpKind::add, {&big, &small}, std::move(out),
                      [inner](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        if (gin[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                        if (gin[1])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % inner] += g[i];
                      });
}

/// Elementwise product with the same broadcasting rule as add().
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "mul";
  const auto plan = detail::plan_broadcast(op, a.shape(), b.shape());
  const Tensor<T>& big = plan.swapped ? b : a;
  const Tensor<T>& small = plan.swapped ? a : b;
  detail::check_finite(op, a);
  detail::check_finite(op, b);
  Tensor<T> out(big.shape());
  auto o = out.mutable_data();
  const auto x = big.data(), y = small.data();
  const std::size_t inner = plan.inner;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i % inner];

  auto* tape = detail::common_tape<T>(op, {&a, &b});
  if (!tape) return out;
  auto xb = big.buffer(), yb = small.buffer();
  return tape->record(OpKind::mul, {&big, &small}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        if (gin[0])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*yb)[i % inner];
                        if (gin[1])
                          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % inner] += g[i] * (*xb)[i];
                      });
}

/// Multiplication by a constant.
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  detail::check_finite("scale", a);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * c;
  auto* tape = detail::common_tape<T>("scale", {&a});
  if (!tape) return out;
  return tape->record(OpKind::scale, {&a}, std::move(out), [c](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * c;
  });
}

/// Concatenation along `axis` (default: last axis).
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::optional<std::size_t> axis_opt = std::nullopt) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (first.rank() == 0) throw ShapeError("concat: scalars cannot be concatenated");
  const std::size_t axis = axis_opt.value_or(first.rank() - 1);
  if (axis >= first.rank()) throw ShapeError("concat: axis out of range for " + first.str());
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) detail::shape_mismatch(op, first, p.shape());
    for (std::size_t i = 0; i < first.rank(); ++i)
      if (i != axis && p.dim(i) != first[i]) detail::shape_mismatch(op, first, p.shape());
    detail::check_finite(op, p);
    total += p.dim(axis);
  }
  std::size_t outer = 1, after = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.rank(); ++i) after *= first[i];
  auto dims = first.dims();
  dims[axis] = total;
  Tensor<T> out{Shape(dims)};
  auto o = out.mutable_data();
  const std::size_t row = total * after;
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * after;
    const auto d = p.data();
    for (std::size_t r = 0; r < outer; ++r) std::copy_n(d.data() + r * w, w, o.data() + r * row + off);
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }

  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    auto* t = detail::common_tape<T>(op, {&p});
    if (t && tape && t != tape) throw std::logic_error("concat: inputs live on different tapes");
    if (t) tape = t;
  }
  if (!tape) return out;
  std::vector<const Tensor<T>*> ins;
  for (const auto& p : parts) ins.push_back(&p);
  return tape->record(OpKind::concat, ins, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        for (std::size_t i = 0; i < gin.size(); ++i) {
                          if (!gin[i]) continue;
                          for (std::size_t r = 0; r < outer; ++r)
                            for (std::size_t j = 0; j < widths[i]; ++j)
                              (*gin[i])[r * widths[i] + j] += g[r * row + offsets[i] + j];
                        }
                      });
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + a.shape().str());
  std::size_t outer = 1, after = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) after *= a.dim(i);
  auto dims = a.shape().dims();
  dims[axis] = end - begin;
  Tensor<T> out{Shape(dims)};
  auto o = out.mutable_data();
  const auto d = a.data();
  const std::size_t in_row = a.dim(axis) * after, w = (end - begin) * after, off = begin * after;
  for (std::size_t r = 0; r < outer; ++r) std::copy_n(d.data() + r * in_row + off, w, o.data() + r * w);
  auto* tape = detail::common_tape<T>("slice", {&a});
  if (!tape) return out;
  return tape->record(OpKind::slice, {&a}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        for (std::size_t r = 0; r < outer; ++r)
                          for (std::size_t j = 0; j < w; ++j) (*gin[0])[r * in_row + off + j] += g[r * w + j];
                      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape.numel() != a.numel()) detail::shape_mismatch("reshape", a.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  auto* tape = detail::common_tape<T>("reshape", {&a});
  if (!tape) return out;
  return tape->record(OpKind::reshape, {&a}, std::move(out), [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  });
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + a.shape().str());
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1), batch = a.numel() / (r * c);
  auto dims = a.shape().dims();
  std::swap(dims[dims.size() - 1], dims[dims.size() - 2]);
  Tensor<T> out{Shape(dims)};
  auto o = out.mutable_data();
  const auto d = a.data();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[s * r * c + j * r + i] = d[s * r * c + i * c + j];
  auto* tape = detail::common_tape<T>("transpose", {&a});
  if (!tape) return out;
  return tape->record(OpKind::transpose, {&a}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        for (std::size_t s = 0; s < batch; ++s)
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) (*gin[0])[s * r * c + i * c + j] += g[s * r * c + j * r + i];
                      });
}

/// Mean over one axis; the axis is removed from the result.
template <class T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("mean: axis out of range for " + a.shape().str());
  detail::check_finite("mean", a);
  std::size_t outer = 1, after = 1;
  const std::size_t len = a.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) after *= a.dim(i);
  Tensor<T> out(a.shape().without(axis));
  auto o = out.mutable_data();
  const auto d = a.data();
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t j = 0; j < after; ++j) o[r * after + j] += d[(r * len + k) * after + j];
  for (auto& v : o) v /= static_cast<T>(len);
  auto* tape = detail::common_tape<T>("mean", {&a});
  if (!tape) return out;
  return tape->record(OpKind::mean, {&a}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        const T inv = T(1) / static_cast<T>(len);
                        for (std::size_t r = 0; r < outer; ++r)
                          for (std::size_t k = 0; k < len; ++k)
                            for (std::size_t j = 0; j < after; ++j) (*gin[0])[(r * len + k) * after + j] += g[r * after + j] * inv;
                      });
}

/// Sum of all elements, as a scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  detail::check_finite("sum", a);
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  auto* tape = detail::common_tape<T>("sum", {&a});
  if (!tape) return out;
  return tape->record(OpKind::sum, {&a}, std::move(out), [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    for (auto& v : *gin[0]) v += g[0];
  });
}

/// Exact GELU: x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  detail::check_finite("gelu", a);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  auto* tape = detail::common_tape<T>("gelu", {&a});
  if (!tape) return out;
  auto xb = a.buffer();
  return tape->record(OpKind::gelu, {&a}, std::move(out), [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = (*xb)[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      (*gin[0])[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  detail::check_finite("sigmoid", a);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_value(x[i]);
  auto* tape = detail::common_tape<T>("sigmoid", {&a});
  if (!tape) return out;
  auto yb = out.buffer();
  return tape->record(OpKind::sigmoid, {&a}, std::move(out), [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = (*yb)[i];
      (*gin[0])[i] += g[i] * y * (T(1) - y);
    }
  });
}

/// Softmax over the last axis of (a + mask). The mask is an additive
/// constant whose shape is a suffix of a's; use a large negative value
/// (e.g. -1e9) to exclude a position.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, const Tensor<T>* mask = nullptr) {
  constexpr std::string_view op = "softmax";
  if (a.rank() == 0) throw ShapeError("softmax: needs rank >= 1");
  if (mask && !a.shape().has_suffix(mask->shape())) detail::shape_mismatch(op, a.shape(), mask->shape());
  detail::check_finite(op, a);
  if (mask) detail::check_finite(op, *mask);
  const std::size_t n = a.shape().back(), rows = a.numel() / n;
  const std::size_t mlen = mask ? mask->numel() : 0;
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* y = o.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = x[r * n + j] + (mask ? (*mask)[(r * n + j) % mlen] : T(0));
      mx = std::max(mx, y[j]);
    }
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(y[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  auto* tape = detail::common_tape<T>(op, {&a});
  if (!tape) return out;
  auto yb = out.buffer();
  return tape->record(OpKind::softmax, {&a}, std::move(out), [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = yb->data() + r * n;
      const T* gr = g.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) (*gin[0])[r * n + j] += y[j] * (gr[j] - dot);
    }
  });
}

/// Layer normalization over the last axis with population variance:
/// gamma * (x - mean) / sqrt(var + eps) + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  constexpr std::string_view op = "layer_norm";
  if (x.rank() == 0) throw ShapeError("layer_norm: needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d) detail::shape_mismatch(op, x.shape(), gamma.shape());
  if (beta.rank() != 1 || beta.dim(0) != d) detail::shape_mismatch(op, x.shape(), beta.shape());
  if (!(eps >= 0)) throw std::invalid_argument("layer_norm: eps must be >= 0");
  detail::check_finite(op, x);
  detail::check_finite(op, gamma);
  detail::check_finite(op, beta);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    if (!(var + eps > 0)) throw NumericError("layer_norm: zero variance with eps = 0 in row " + std::to_string(r));
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      o[r * d + j] = gd[j] * h + bd[j];
    }
  }
  auto* tape = detail::common_tape<T>(op, {&x, &gamma, &beta});
  if (!tape) return out;
  auto gb = gamma.buffer();
  return tape->record(OpKind::layer_norm, {&x, &gamma, &beta}, std::move(out),
                      [=](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        std::vector<T> dh(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* h = xhat->data() + r * d;
                          const T* gr = g.data() + r * d;
                          if (gin[1])
                            for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += gr[j] * h[j];
                          if (gin[2])
                            for (std::size_t j = 0; j < d; ++j) (*gin[2])[j] += gr[j];
                          if (!gin[0]) continue;
                          T m1 = 0, m2 = 0;
                          for (std::size_t j = 0; j < d; ++j) {
                            dh[j] = gr[j] * (*gb)[j];
                            m1 += dh[j];
                            m2 += dh[j] * h[j];
                          }
                          m1 /= static_cast<T>(d);
                          m2 /= static_cast<T>(d);
                          const T rs = (*rstd)[r];
                          for (std::size_t j = 0; j < d; ++j) (*gin[0])[r * d + j] += rs * (dh[j] - m1 - h[j] * m2);
                        }
                      });
}

/// Rows of `table` selected by ids: result [ids.size(), D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + table.shape().str());
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  auto o = out.mutable_data();
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  }
  auto* tape = detail::common_tape<T>("embedding", {&table});
  if (!tape) return out;
  std::vector<int> idv(ids.begin(), ids.end());
  return tape->record(OpKind::embedding, {&table}, std::move(out),
                      [idv = std::move(idv), d](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        for (std::size_t i = 0; i < idv.size(); ++i)
                          for (std::size_t j = 0; j < d; ++j) (*gin[0])[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
                      });
}

/// Mean softmax cross-entropy of logits [n, C] against integer targets;
/// entries equal to kIgnoreLabel are skipped.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  constexpr std::string_view op = "cross_entropy";
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2, got " + logits.shape().str());
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + logits.shape().str());
  detail::check_finite(op, logits);
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  const auto x = logits.data();
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * c;
    T mx = *std::max_element(xr, xr + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += ((*probs)[r * c + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] /= s;
    if (targets[r] == kIgnoreLabel) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(c) + " classes");
    total += std::log(s) + mx - xr[targets[r]];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(count));
  auto* tape = detail::common_tape<T>(op, {&logits});
  if (!tape) return out;
  std::vector<int> tv(targets.begin(), targets.end());
  return tape->record(OpKind::cross_entropy, {&logits}, std::move(out),
                      [=, tv = std::move(tv)](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                        const T w = g[0] / static_cast<T>(count);
                        for (std::size_t r = 0; r < n; ++r) {
                          if (tv[r] == kIgnoreLabel) continue;
                          for (std::size_t j = 0; j < c; ++j) (*gin[0])[r * c + j] += w * (*probs)[r * c + j];
                          (*gin[0])[r * c + static_cast<std::size_t>(tv[r])] -= w;
                        }
                      });
}

}  // namespace crossgate

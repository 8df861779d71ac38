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

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "crossgate/tensor.hpp"

namespace crossgate {

/// |a - b| / max(|a|, |b|, floor).
template <class T>
T relative_error(T a, T b, T floor = T(1e-8)) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) at the
/// listed flat coordinates of x. Returns one value per coordinate.
template <class T, class F>
std::vector<T> finite_difference_at(F&& f, const Tensor<T>& x, std::span<const std::size_t> coords, T eps = T(1e-5)) {
  if (!(eps > 0)) throw std::invalid_argument("finite_difference: eps must be > 0");
  Tensor<T> probe = x.detach();
  std::vector<T> out;
  out.reserve(coords.size());
  for (auto i : coords) {
    if (i >= x.numel()) throw std::out_of_range("finite_difference: coordinate " + std::to_string(i) + " out of range");
    const T orig = x[i];
    probe.mutable_data()[i] = orig + eps;
    const T up = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
    probe.mutable_data()[i] = orig - eps;
    const T down = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
    probe.mutable_data()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_difference: non-finite function value at coordinate " + std::to_string(i));
    out.push_back((up - down) / (T(2) * eps));
  }
  return out;
}

/// Full central-difference gradient of a scalar function of x.
template <class T, class F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, T eps = T(1e-5)) {
  std::vector<std::size_t> all(x.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return Tensor<T>(x.shape(), finite_difference_at(std::forward<F>(f), x, std::span<const std::size_t>(all), eps));
}

}  // namespace crossgate

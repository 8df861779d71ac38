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
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>

#include "crossgate/config.hpp"
#include "crossgate/params.hpp"

namespace crossgate {

/// Linear warmup from 0 over the first ceil(warmup_fraction * total) steps,
/// then linear decay to 0 at total.
inline double lr_at_step(std::size_t step, std::size_t total, double base_lr, double warmup_fraction) {
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw std::invalid_argument("lr_at_step: warmup_fraction must be in (0, 1)");
  if (step > total)
    throw std::out_of_range("lr_at_step: step " + std::to_string(step) + " beyond total " + std::to_string(total));
  if (step == 0 || step == total) return 0.0;
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
  if (step <= warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return base_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

inline double group_multiplier(ParamGroup g, const TrainConfig& t) {
  switch (g) {
    case ParamGroup::uni_modal: return t.lr_mult_uni;
    case ParamGroup::cross_modal: return t.lr_mult_cross;
    case ParamGroup::heads: return t.lr_mult_heads;
  }
  throw std::invalid_argument("group_lr: unknown parameter group " + std::to_string(static_cast<int>(g)));
}

inline double group_lr(ParamGroup g, double lr, const TrainConfig& t) { return lr * group_multiplier(g, t); }

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  static AdamWHyper from(const TrainConfig& t) { return {t.beta1, t.beta2, t.adam_eps, t.weight_decay}; }
};

/// First and second moments per parameter, plus the shared step counter.
struct OptimState {
  std::uint64_t t = 0;
  TensorMap<double> m;
  TensorMap<double> v;

  static OptimState zeros_like(const ParamStore& params) {
    OptimState s;
    for (const auto& [name, p] : params.values()) {
      s.m.emplace(name, Tensor<double>(p.shape(), 0.0));
      s.v.emplace(name, Tensor<double>(p.shape(), 0.0));
    }
    return s;
  }
};

/// One AdamW coordinate sweep at step t (already incremented, t >= 1).
inline void adamw_update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v,
                         std::uint64_t t, double lr, const AdamWHyper& h, bool decay) {
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const double wd = decay ? h.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1 - h.beta2) * g[i] * g[i];
    const double mh = m[i] / c1, vh = v[i] / c2;
    p[i] -= lr * (mh / (std::sqrt(vh) + h.eps) + wd * p[i]);
  }
}

/// Global L2 norm over every gradient tensor.
inline double global_norm(const TensorMap<double>& grads) {
  double s = 0;
  for (const auto& [name, g] : grads)
    for (double x : g.data()) s += x * x;
  return std::sqrt(s);
}

/// Scales all gradients so their global norm is at most max_norm (0
/// disables). Returns the norm before clipping.
inline double clip_grad_norm(TensorMap<double>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0 && n > max_norm) {
    const double k = max_norm / n;
    for (auto& [name, g] : grads)
      for (auto& x : g.mutable_data()) x *= k;
  }
  return n;
}

/// AdamW over every registered parameter with per-group learning rates.
/// Parameters without a gradient are updated as if it were zero. A
/// non-finite gradient rejects the whole step before anything changes.
inline void adamw_step(ParamStore& params, const TensorMap<double>& grads, OptimState& state, double lr, const TrainConfig& t) {
  if (!(lr >= 0)) throw std::invalid_argument("adamw_step: lr must be >= 0");
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::out_of_range("adamw_step: gradient for unknown parameter '" + name + "'");
    if (g.shape() != params.at(name).shape())
      throw ShapeError("adamw_step: gradient for '" + name + "' has shape " + g.shape().str() + ", parameter has " +
                       params.at(name).shape().str());
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericError("adamw_step: non-finite gradient in parameter '" + name + "' at index " + std::to_string(i));
  }
  const auto h = AdamWHyper::from(t);
  ++state.t;
  for (const auto& spec : params.specs()) {
    const auto g = grads.find(spec.name);
    const Tensor<double> grad = g == grads.end() ? Tensor<double>(spec.shape, 0.0) : g->second;
    const auto gd = grad.data();
    adamw_update(params.mutable_data(spec.name), gd, state.m.at(spec.name).mutable_data(), state.v.at(spec.name).mutable_data(),
                 state.t, group_lr(spec.group, lr, t), h, !spec.decay_exempt);
  }
}

/// Checks that every stored tensor has exactly one registry entry (and so
/// exactly one group) and vice versa. Returns the number audited.
inline std::size_t audit_param_groups(const ParamStore& params) {
  std::set<std::string, std::less<>> seen;
  for (const auto& s : params.specs()) {
    if (!seen.insert(s.name).second) throw std::logic_error("parameter '" + s.name + "' registered twice");
    if (!params.contains(s.name)) throw std::logic_error("registered parameter '" + s.name + "' has no tensor");
  }
  for (const auto& [name, v] : params.values())
    if (!seen.count(name)) throw std::logic_error("parameter '" + name + "' belongs to no group");
  return seen.size();
}

}  // namespace crossgate

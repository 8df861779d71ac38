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

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "crossgate/config.hpp"
#include "crossgate/rng.hpp"
#include "crossgate/tensor.hpp"

namespace crossgate {

enum class Modality { text, visual };

inline std::string_view to_string(Modality m) { return m == Modality::text ? "text" : "visual"; }

/// Optimizer groups; each parameter belongs to exactly one.
enum class ParamGroup { uni_modal, cross_modal, heads };

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::uni_modal: return "uni_modal";
    case ParamGroup::cross_modal: return "cross_modal";
    case ParamGroup::heads: return "heads";
  }
  return "?";
}

enum class Init { normal, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group;
  bool decay_exempt;
  Init init;
};

template <class T>
using TensorMap = std::map<std::string, Tensor<T>, std::less<>>;

/// Uni-modal layers (1-based) bridged into fusion layer `l` (1-based).
inline std::vector<std::size_t> bridge_sources(const ModelConfig& c, Modality m, std::size_t l) {
  const std::size_t depth = m == Modality::text ? c.text_layers : c.visual_layers;
  std::vector<std::size_t> all;
  for (std::size_t k = 1; k <= depth; ++k) all.push_back(k);
  switch (c.topology) {
    case Topology::all_gated: return all;
    case Topology::same_layer: return {depth - c.fusion_layers + l};
    case Topology::last_only: return {};
    case Topology::bottom_only: return l == 1 ? all : std::vector<std::size_t>{};
  }
  return {};
}

inline std::string layer_prefix(std::string_view tower, std::size_t l) {
  return std::string(tower) + ".layer" + std::to_string(l);
}

namespace detail {

struct SpecBuilder {
  std::vector<ParamSpec>& out;
  ParamGroup group;

  void weight(std::string name, Shape s) { out.push_back({std::move(name), std::move(s), group, false, Init::normal}); }
  void embed(std::string name, Shape s) { out.push_back({std::move(name), std::move(s), group, false, Init::normal}); }
  void bias(std::string name, std::size_t n) { out.push_back({std::move(name), Shape{n}, group, true, Init::zeros}); }
  void norm(const std::string& p, std::size_t d) {
    out.push_back({p + ".g", Shape{d}, group, true, Init::ones});
    out.push_back({p + ".b", Shape{d}, group, true, Init::zeros});
  }
  void attention(const std::string& p, std::size_t d) {
    for (const char* w : {"q", "k", "v", "o"}) {
      weight(p + ".w" + w, Shape{d, d});
      bias(p + ".b" + w, d);
    }
  }
  void ffn(const std::string& p, std::size_t d, std::size_t hidden) {
    weight(p + ".w1", Shape{d, hidden});
    bias(p + ".b1", hidden);
    weight(p + ".w2", Shape{hidden, d});
    bias(p + ".b2", d);
  }
  void encoder_layer(const std::string& p, std::size_t d, std::size_t mult) {
    attention(p + ".attn", d);
    norm(p + ".ln1", d);
    ffn(p + ".ffn", d, mult * d);
    norm(p + ".ln2", d);
  }
  void fusion_stream(const std::string& p, std::size_t d, std::size_t mult) {
    attention(p + ".msa", d);
    norm(p + ".ln1", d);
    attention(p + ".mca", d);
    norm(p + ".ln2", d);
    ffn(p + ".ffn", d, mult * d);
    norm(p + ".ln3", d);
  }
};

}  // namespace detail

/// Every parameter tensor of the model, in a fixed order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> specs;
  detail::SpecBuilder uni{specs, ParamGroup::uni_modal};
  uni.weight("vis.patch_w", Shape{c.patch_features(), c.visual_dim});
  uni.embed("vis.cls", Shape{c.visual_dim});
  uni.embed("vis.pos", Shape{c.patch_count() + 1, c.visual_dim});
  for (std::size_t l = 1; l <= c.visual_layers; ++l) uni.encoder_layer(layer_prefix("vis", l), c.visual_dim, c.ffn_mult);
  uni.embed("txt.word", Shape{c.vocab_size, c.text_dim});
  uni.embed("txt.pos", Shape{c.max_text_len, c.text_dim});
  for (std::size_t l = 1; l <= c.text_layers; ++l) uni.encoder_layer(layer_prefix("txt", l), c.text_dim, c.ffn_mult);

  detail::SpecBuilder cross{specs, ParamGroup::cross_modal};
  cross.weight("bridge.text_proj", Shape{c.text_dim, c.fusion_dim});
  specs.push_back({"bridge.text_type", Shape{c.fusion_dim}, ParamGroup::cross_modal, true, Init::normal});
  cross.weight("bridge.visual_proj", Shape{c.visual_dim, c.fusion_dim});
  specs.push_back({"bridge.visual_type", Shape{c.fusion_dim}, ParamGroup::cross_modal, true, Init::normal});
  for (std::size_t l = 1; l <= c.fusion_layers; ++l) {
    const auto p = layer_prefix("fusion", l);
    for (auto m : {Modality::text, Modality::visual}) {
      const std::string mod(to_string(m));
      const std::size_t src_dim = m == Modality::text ? c.text_dim : c.visual_dim;
      if (!bridge_sources(c, m, l).empty()) {
        if (c.per_layer_bridge_proj) cross.weight(p + "." + mod + "_proj", Shape{src_dim, c.fusion_dim});
        cross.weight(p + ".gate_" + mod + ".w", Shape{src_dim, c.fusion_dim});
        cross.bias(p + ".gate_" + mod + ".b", c.fusion_dim);
      }
      cross.norm(p + ".link_" + mod, c.fusion_dim);
    }
    cross.fusion_stream(p + ".text", c.fusion_dim, c.ffn_mult);
    cross.fusion_stream(p + ".visual", c.fusion_dim, c.ffn_mult);
  }

  detail::SpecBuilder heads{specs, ParamGroup::heads};
  heads.weight("head.mlm.w", Shape{c.fusion_dim, c.vocab_size});
  heads.bias("head.mlm.b", c.vocab_size);
  heads.weight("head.itm.w", Shape{2 * c.fusion_dim, 2});
  heads.bias("head.itm.b", 2);
  if (c.cls_classes) {
    heads.weight("head.cls.w", Shape{2 * c.fusion_dim, c.cls_classes});
    heads.bias("head.cls.b", c.cls_classes);
  }
  return specs;
}

/// Parameter count from the layer formulas (see README, "Parameter
/// accounting"); independent of param_specs().
inline std::uint64_t closed_form_param_count(const ModelConfig& c) {
  using u = std::uint64_t;
  auto encoder_layer = [&](u d) { return 4 * d * d + 9 * d + 2 * d * (c.ffn_mult * d) + c.ffn_mult * d; };
  const u dv = c.visual_dim, dt = c.text_dim, df = c.fusion_dim, f = c.ffn_mult * df;
  u n = 0;
  n += c.patch_features() * dv + dv + (c.patch_count() + 1) * dv;
  n += c.visual_layers * encoder_layer(dv);
  n += c.vocab_size * dt + c.max_text_len * dt;
  n += c.text_layers * encoder_layer(dt);
  n += dt * df + df + dv * df + df;
  for (std::size_t l = 1; l <= c.fusion_layers; ++l) {
    for (auto m : {Modality::text, Modality::visual}) {
      const u src = m == Modality::text ? dt : dv;
      if (!bridge_sources(c, m, l).empty()) n += (c.per_layer_bridge_proj ? src * df : 0) + src * df + df;
      n += 2 * df;
    }
    n += 2 * (8 * df * df + 15 * df + 2 * df * f + f);
  }
  n += df * c.vocab_size + c.vocab_size + 2 * df * 2 + 2;
  if (c.cls_classes) n += 2 * df * c.cls_classes + c.cls_classes;
  return n;
}

inline std::uint64_t counted_param_count(const std::vector<ParamSpec>& specs) {
  std::uint64_t n = 0;
  for (const auto& s : specs) n += s.shape.numel();
  return n;
}

/// Named parameter tensors plus their registry entries.
class ParamStore {
 public:
  ParamStore() = default;

  /// Allocates every parameter and draws initial values from the seed.
  static ParamStore init(const ModelConfig& c, std::uint64_t seed) {
    ParamStore s;
    s.specs_ = param_specs(c);
    Rng rng = Rng::derive(seed, {0x1417});
    for (const auto& spec : s.specs_) {
      Tensor<double> t(spec.shape);
      auto d = t.mutable_data();
      switch (spec.init) {
        case Init::normal:
          for (auto& v : d) v = rng.normal(0.0, c.init_std);
          break;
        case Init::ones:
          std::fill(d.begin(), d.end(), 1.0);
          break;
        case Init::zeros: break;
      }
      s.values_.emplace(spec.name, std::move(t));
    }
    return s;
  }

  const std::vector<ParamSpec>& specs() const noexcept { return specs_; }
  const TensorMap<double>& values() const noexcept { return values_; }

  const ParamSpec& spec(std::string_view name) const {
    for (const auto& s : specs_)
      if (s.name == name) return s;
    throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  }

  bool contains(std::string_view name) const { return values_.find(name) != values_.end(); }

  const Tensor<double>& at(std::string_view name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  /// Replaces a parameter's value; the shape must match the registry.
  void set(std::string_view name, Tensor<double> value) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    if (value.shape() != it->second.shape())
      throw ShapeError("parameter '" + std::string(name) + "': expected " + it->second.shape().str() + ", got " + value.shape().str());
    it->second = value.detach();
  }

  std::span<double> mutable_data(std::string_view name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    return it->second.mutable_data();
  }

  std::uint64_t count() const { return counted_param_count(specs_); }

  template <class U>
  TensorMap<U> cast() const {
    TensorMap<U> out;
    for (const auto& [k, v] : values_) out.emplace(k, v.template cast<U>());
    return out;
  }

 private:
  std::vector<ParamSpec> specs_;
  TensorMap<double> values_;
};

/// Read access to parameters for one forward pass. With a tape, each
/// parameter is registered as a leaf on first use so its gradient can be
/// read back by name.
template <class T>
class ParamView {
 public:
  explicit ParamView(const TensorMap<T>& values, Tape<T>* tape = nullptr) : values_(&values), tape_(tape) {}

  const Tensor<T>& operator()(std::string_view name) const {
    auto it = values_->find(name);
    if (it == values_->end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    if (!tape_) return it->second;
    auto w = watched_.find(name);
    if (w == watched_.end()) w = watched_.emplace(std::string(name), tape_->watch(it->second)).first;
    return w->second;
  }

  bool contains(std::string_view name) const { return values_->find(name) != values_->end(); }
  Tape<T>* tape() const noexcept { return tape_; }

  /// Parameters touched so far, as tape leaves.
  const TensorMap<T>& watched() const noexcept { return watched_; }

 private:
  const TensorMap<T>* values_;
  Tape<T>* tape_;
  mutable TensorMap<T> watched_;
};

}  // namespace crossgate

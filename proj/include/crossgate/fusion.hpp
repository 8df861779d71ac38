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

#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "crossgate/config.hpp"
#include "crossgate/encoders.hpp"
#include "crossgate/ops.hpp"
#include "crossgate/params.hpp"

namespace crossgate {

/// Identifies one bridge: fusion layer (1-based), stream, and the
/// uni-modal source layer (1-based).
struct GateKey {
  std::size_t layer;
  Modality modality;
  std::size_t source;

  friend auto operator<=>(const GateKey&, const GateKey&) = default;
};

template <class T>
struct FusionAttention {
  Tensor<T> text_msa, text_mca, visual_msa, visual_mca;
};

/// Outputs of every fusion layer plus the recorded gates and attention.
template <class T>
struct FusionState {
  std::vector<Tensor<T>> z_text;    // Z^T_1..Z^T_{L_F}
  std::vector<Tensor<T>> z_visual;  // Z^V_1..Z^V_{L_F}
  std::map<GateKey, Tensor<T>> gates;
  std::vector<FusionAttention<T>> attn;

  const Tensor<T>& final_text() const { return z_text.back(); }
  const Tensor<T>& final_visual() const { return z_visual.back(); }
};

/// Z_0 = proj(U_{S-1}) + type for each modality, where U_{S-1} is the
/// uni-modal output at the configured start layer.
template <class T>
std::pair<Tensor<T>, Tensor<T>> init_fusion_inputs(const LayerTrace<T>& trace, const ModelConfig& c, const ParamView<T>& p) {
  const std::size_t st = c.text_start() - 1, sv = c.visual_start() - 1;
  if (st > trace.text.layers.size() || sv > trace.visual.layers.size())
    throw std::out_of_range("init_fusion_inputs: start layer beyond the recorded trace (text " + std::to_string(st) + "/" +
                            std::to_string(trace.text.layers.size()) + ", visual " + std::to_string(sv) + "/" +
                            std::to_string(trace.visual.layers.size()) + ")");
  auto zt = add(matmul(trace.text.at(st), p("bridge.text_proj")), p("bridge.text_type"));
  auto zv = add(matmul(trace.visual.at(sv), p("bridge.visual_proj")), p("bridge.visual_type"));
  return {std::move(zt), std::move(zv)};
}

/// g = sigmoid(source W + b + prev), elementwise over tokens and dims.
template <class T>
Tensor<T> compute_gate(const Tensor<T>& source, const Tensor<T>& prev, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (source.rank() != 2 || prev.rank() != 2 || source.dim(0) != prev.dim(0))
    throw ShapeError("compute_gate: source " + source.shape().str() + " and stream " + prev.shape().str() +
                     " must share the sequence axis");
  return sigmoid(add(add(matmul(source, weight), bias), prev));
}

/// One bridged uni-modal layer.
template <class T>
struct BridgeSource {
  std::size_t layer;
  const Tensor<T>* value;
};

/// Z~ = LN(prev + sum_k g_k * proj(source_k)). With no sources this is
/// LN(prev). Gate values are recorded into `gates` when given.
template <class T>
Tensor<T> bridge_aggregate(const Tensor<T>& prev, const std::vector<BridgeSource<T>>& sources, const ParamView<T>& p,
                           std::size_t l, Modality m, const ModelConfig& c, std::map<GateKey, Tensor<T>>* gates = nullptr) {
  const std::string mod(to_string(m));
  const std::string layer = layer_prefix("fusion", l);
  Tensor<T> acc = prev;
  if (!sources.empty()) {
    const auto& proj = c.per_layer_bridge_proj ? p(layer + "." + mod + "_proj") : p("bridge." + mod + "_proj");
    const auto& gw = p(layer + ".gate_" + mod + ".w");
    const auto& gb = p(layer + ".gate_" + mod + ".b");
    for (const auto& src : sources) {
      if (src.value->dim(0) != prev.dim(0))
        throw ShapeError("bridge_aggregate: source layer " + std::to_string(src.layer) + " has shape " +
                         src.value->shape().str() + ", stream has " + prev.shape().str());
      auto g = compute_gate(*src.value, prev, gw, gb);
      if (gates) (*gates)[GateKey{l, m, src.layer}] = g.detach();
      acc = add(acc, mul(g, matmul(*src.value, proj)));
    }
  }
  return norm(acc, p, layer + ".link_" + mod, c.ln_eps);
}

template <class T>
struct FusionLayerOutput {
  Tensor<T> text;
  Tensor<T> visual;
  FusionAttention<T> attn;
};

/// One co-attention layer. Each stream: x1 = LN(x + MSA(x));
/// x2 = LN(x1 + MCA(x1, other stream's x1)); out = LN(x2 + FFN(x2)).
template <class T>
FusionLayerOutput<T> fusion_layer(const Tensor<T>& zt, const Tensor<T>& zv, const ParamView<T>& p, const std::string& prefix,
                                  std::size_t heads, double eps) {
  if (zt.rank() != 2 || zv.rank() != 2 || zt.dim(1) != zv.dim(1))
    throw ShapeError("fusion_layer: hidden dims differ: text " + zt.shape().str() + ", visual " + zv.shape().str());
  const std::string tp = prefix + ".text", vp = prefix + ".visual";
  auto t_msa = multi_head_attention(zt, zt, p, tp + ".msa", heads);
  auto v_msa = multi_head_attention(zv, zv, p, vp + ".msa", heads);
  const auto t1 = norm(add(zt, t_msa.out), p, tp + ".ln1", eps);
  const auto v1 = norm(add(zv, v_msa.out), p, vp + ".ln1", eps);
  // Cross attention reads the other stream's post-MSA state.
  auto t_mca = multi_head_attention(t1, v1, p, tp + ".mca", heads);
  auto v_mca = multi_head_attention(v1, t1, p, vp + ".mca", heads);
  const auto t2 = norm(add(t1, t_mca.out), p, tp + ".ln2", eps);
  const auto v2 = norm(add(v1, v_mca.out), p, vp + ".ln2", eps);
  auto t_out = norm(add(t2, feed_forward(t2, p, tp + ".ffn")), p, tp + ".ln3", eps);
  auto v_out = norm(add(v2, feed_forward(v2, p, vp + ".ffn")), p, vp + ".ln3", eps);
  return {std::move(t_out), std::move(v_out),
          {std::move(t_msa.probs), std::move(t_mca.probs), std::move(v_msa.probs), std::move(v_mca.probs)}};
}

/// Recomputes fusion layers first..L_F of `state`, keeping earlier layers
/// and their gates.
template <class T>
FusionState<T> resume_fusion(const LayerTrace<T>& trace, const ModelConfig& c, const ParamView<T>& p, FusionState<T> state,
                             std::size_t first) {
  if (first < 1 || first > state.z_text.size() + 1)
    throw std::out_of_range("resume_fusion: no fusion layer " + std::to_string(first - 1) + " to resume from");
  state.z_text.resize(first - 1);
  state.z_visual.resize(first - 1);
  state.attn.resize(first - 1);
  std::erase_if(state.gates, [&](const auto& kv) { return kv.first.layer >= first; });
  Tensor<T> zt, zv;
  if (first == 1) {
    std::tie(zt, zv) = init_fusion_inputs(trace, c, p);
  } else {
    zt = state.z_text.back();
    zv = state.z_visual.back();
  }
  auto gather = [&](Modality m, std::size_t l) {
    const auto& tower = m == Modality::text ? trace.text : trace.visual;
    std::vector<BridgeSource<T>> out;
    for (auto k : bridge_sources(c, m, l)) out.push_back({k, &tower.at(k)});
    return out;
  };
  for (std::size_t l = first; l <= c.fusion_layers; ++l) {
    const auto in_t = bridge_aggregate(zt, gather(Modality::text, l), p, l, Modality::text, c, &state.gates);
    const auto in_v = bridge_aggregate(zv, gather(Modality::visual, l), p, l, Modality::visual, c, &state.gates);
    auto out = fusion_layer(in_t, in_v, p, layer_prefix("fusion", l), c.fusion_heads, c.ln_eps);
    zt = out.text;
    zv = out.visual;
    state.z_text.push_back(std::move(out.text));
    state.z_visual.push_back(std::move(out.visual));
    state.attn.push_back(std::move(out.attn));
  }
  return state;
}

template <class T>
FusionState<T> fusion_forward(const LayerTrace<T>& trace, const ModelConfig& c, const ParamView<T>& p) {
  return resume_fusion(trace, c, p, FusionState<T>{}, 1);
}

}  // namespace crossgate

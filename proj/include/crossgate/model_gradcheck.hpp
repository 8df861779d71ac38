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
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crossgate/corpus.hpp"
#include "crossgate/gradcheck.hpp"
#include "crossgate/pretraining.hpp"

namespace crossgate {

struct BlockCheck {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0;
};

struct GradcheckReport {
  std::vector<BlockCheck> blocks;

  double worst() const {
    double w = 0;
    for (const auto& b : blocks) w = std::max(w, b.max_rel_error);
    return w;
  }
  bool passed(double tol) const { return worst() < tol; }
};

/// Two-item batch (one matched with masked words, one mismatched) over a
/// tiny synthetic corpus drawn from `seed`.
inline PairBatch gradcheck_batch(const Corpus& corpus, const ModelConfig& c) {
  const auto vocab = corpus_vocab();
  PairBatch b;
  auto ids = vocab.encode(corpus[0].caption, c.max_text_len);
  std::vector<int> labels(ids.size(), kIgnoreLabel);
  for (std::size_t i : {std::size_t{1}, ids.size() - 2}) {
    labels[i] = ids[i];
    ids[i] = Vocab::kMask;
  }
  b.items.push_back({ids, labels, 0, 0, 1});
  b.items.push_back({vocab.encode(corpus[1].caption, c.max_text_len), std::vector<int>(ids.size(), kIgnoreLabel), 1, 2, 0});
  return b;
}

/// Compares reverse-mode gradients of the joint pre-training loss with
/// central differences on a random sample of up to `coords_per_tensor`
/// coordinates of every parameter tensor. The analytic pass runs in double;
/// the difference quotients are evaluated in long double so that rounding
/// in the loss does not swamp small gradient entries.
template <class F = long double>
GradcheckReport gradcheck_model(const ModelConfig& c, std::uint64_t seed, std::size_t coords_per_tensor = 50,
                                       double eps = 1e-5) {
  const auto corpus = generate_corpus(3, c, seed);
  const auto batch = gradcheck_batch(corpus, c);
  auto store = ParamStore::init(c, seed);
  // Random gate biases and LN parameters so every block has a generic gradient.
  Rng perturb = Rng::derive(seed, {0x9C, 1});
  for (const auto& s : store.specs())
    if (s.init != Init::normal)
      for (auto& v : store.mutable_data(s.name)) v += perturb.normal(0.0, 0.1);

  Tape<double> tape;
  const ParamView<double> view(store.values(), &tape);
  const auto grads = tape.backward(pretrain_step_loss(batch, corpus, c, view).total, Retain::leaves);

  const auto values_ld = store.cast<F>();
  std::vector<Tensor<F>> images;
  std::vector<PairForward<F>> base;
  for (const auto& item : batch.items) {
    images.push_back(corpus[item.image_record].image.template cast<F>());
    base.push_back(forward_pair(item.ids, images.back(), c, ParamView<F>(values_ld)));
  }
  // Only the part of the network downstream of a parameter is rebuilt.
  auto layer_of = [](const std::string& name, std::size_t at) -> std::size_t {
    if (name.compare(at, 5, "layer") != 0) return 0;
    return std::stoul(name.substr(at + 5, name.find('.', at) - at - 5));
  };
  auto loss_ld = [&](const TensorMap<F>& v, const std::string& name) {
    const ParamView<F> p(v);
    const bool vis = name.rfind("vis.", 0) == 0, txt = name.rfind("txt.", 0) == 0;
    const bool head = name.rfind("head.", 0) == 0;
    const std::size_t fusion_from = name.rfind("fusion.", 0) == 0 ? layer_of(name, 7) : 1;
    const std::size_t tower_from = vis || txt ? layer_of(name, 4) : 0;
    std::vector<FusionState<F>> states;
    for (std::size_t i = 0; i < batch.items.size(); ++i) {
      if (head) {
        states.push_back(base[i].fusion);
        continue;
      }
      LayerTrace<F> trace = base[i].trace;
      const auto& ids = batch.items[i].ids;
      if (vis)
        trace.visual = tower_from ? resume_tower(trace.visual, tower_from, p, "vis", c.visual_layers, c.uni_heads, c.ln_eps)
                                  : encode_visual(patchify_embed(images[i], c, p), c, p);
      if (txt) {
        const auto mask = padding_mask<F>(ids);
        const bool padded = std::find(ids.begin(), ids.end(), Vocab::kPad) != ids.end();
        trace.text = tower_from ? resume_tower(trace.text, tower_from, p, "txt", c.text_layers, c.uni_heads, c.ln_eps,
                                               padded ? &mask : nullptr)
                                : encode_textual(embed_tokens(ids, c, p), c, p);
      }
      states.push_back(resume_fusion(trace, c, p, base[i].fusion, std::max<std::size_t>(fusion_from, 1)));
    }
    return batch_loss(batch, states, c, p).total.item();
  };

  GradcheckReport report;
  Rng pick = Rng::derive(seed, {0x9C, 2});
  for (const auto& s : store.specs()) {
    const auto& x = values_ld.at(s.name);
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > coords_per_tensor) {
      pick.shuffle(coords.begin(), coords.end());
      coords.resize(coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto f = [&](const Tensor<F>& probe) {
      auto v = values_ld;
      v.at(s.name) = probe;
      return loss_ld(v, s.name);
    };
    const auto fd = finite_difference_at(f, x, std::span<const std::size_t>(coords), static_cast<F>(eps));
    std::optional<Tensor<double>> g;
    if (auto w = view.watched().find(s.name); w != view.watched().end()) g = grads.find(w->second);
    BlockCheck block{s.name, coords.size(), 0.0};
    for (std::size_t k = 0; k < coords.size(); ++k) {
      const double a = g ? (*g)[coords[k]] : 0.0;
      block.max_rel_error = std::max(block.max_rel_error, relative_error(a, static_cast<double>(fd[k])));
    }
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace crossgate

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
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossgate/corpus.hpp"
#include "crossgate/encoders.hpp"
#include "crossgate/fusion.hpp"
#include "crossgate/ops.hpp"
#include "crossgate/params.hpp"
#include "crossgate/rng.hpp"
#include "crossgate/vocab.hpp"

namespace crossgate {

/// Full forward pass of one (text, image) pair.
template <class T>
struct PairForward {
  LayerTrace<T> trace;
  FusionState<T> fusion;
};

template <class T>
PairForward<T> forward_pair(const std::vector<int>& ids, const Tensor<T>& image, const ModelConfig& c, const ParamView<T>& p) {
  PairForward<T> out;
  const auto tokens = embed_tokens(ids, c, p);
  const auto patches = patchify_embed(image, c, p);
  out.trace.text = encode_textual(tokens, c, p);
  out.trace.visual = encode_visual(patches, c, p);
  out.fusion = fusion_forward(out.trace, c, p);
  return out;
}

/// Per-position vocabulary logits over the final text stream.
template <class T>
Tensor<T> mlm_logits(const FusionState<T>& s, const ParamView<T>& p) {
  return add(matmul(s.final_text(), p("head.mlm.w")), p("head.mlm.b"));
}

/// Concatenated [text ; visual] pooled representation, 1 x 2 D_f.
template <class T>
Tensor<T> pooled_pair(const FusionState<T>& s, Pooling pooling) {
  auto pool = [&](const Tensor<T>& z) {
    if (pooling == Pooling::first_token) return slice(z, 0, 0, 1);
    return reshape(mean(z, 0), Shape{1, z.dim(1)});
  };
  return concat<T>({pool(s.final_text()), pool(s.final_visual())});
}

/// Two logits: index 0 mismatched, index 1 matched.
template <class T>
Tensor<T> itm_logits(const FusionState<T>& s, const ParamView<T>& p, Pooling pooling) {
  return add(matmul(pooled_pair(s, pooling), p("head.itm.w")), p("head.itm.b"));
}

/// Downstream classification logits (only when cls_classes > 0).
template <class T>
Tensor<T> cls_logits(const FusionState<T>& s, const ParamView<T>& p, Pooling pooling) {
  return add(matmul(pooled_pair(s, pooling), p("head.cls.w")), p("head.cls.b"));
}

/// Mean cross-entropy over the labelled positions of one sequence.
template <class T>
Tensor<T> mlm_loss(const FusionState<T>& s, std::span<const int> labels, const ParamView<T>& p) {
  const auto logits = mlm_logits(s, p);
  if (labels.size() != logits.dim(0))
    throw ShapeError("mlm_loss: " + std::to_string(labels.size()) + " labels for a text stream of " + std::to_string(logits.dim(0)));
  if (std::all_of(labels.begin(), labels.end(), [](int l) { return l == kIgnoreLabel; }))
    throw std::invalid_argument("mlm_loss: no masked positions");
  return cross_entropy(logits, labels);
}

template <class T>
Tensor<T> itm_loss(const FusionState<T>& s, int label, const ParamView<T>& p, Pooling pooling) {
  if (label != 0 && label != 1) throw std::invalid_argument("itm_loss: label must be 0 or 1");
  const std::vector<int> t{label};
  return cross_entropy(itm_logits(s, p, pooling), std::span<const int>(t));
}

struct MaskedTokens {
  std::vector<int> ids;
  std::vector<int> labels;  // original id at selected positions, kIgnoreLabel elsewhere
};

/// Selects each non-special position with probability `rate`; a selected
/// position becomes [MASK] 80% of the time, a random word 10%, unchanged
/// 10%. `vocab_size` bounds the random replacement ids.
inline MaskedTokens mask_tokens(const std::vector<int>& ids, double rate, std::size_t vocab_size, Rng& rng) {
  if (!(rate > 0 && rate < 1)) throw std::invalid_argument("mask_tokens: rate must be in (0, 1)");
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecials)) throw std::invalid_argument("mask_tokens: vocabulary has no words");
  MaskedTokens m{ids, std::vector<int>(ids.size(), kIgnoreLabel)};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (Vocab::is_special(ids[i]) || !rng.bernoulli(rate)) continue;
    m.labels[i] = ids[i];
    const double u = rng.uniform();
    if (u < 0.8) {
      m.ids[i] = Vocab::kMask;
    } else if (u < 0.9) {
      m.ids[i] = Vocab::kNumSpecials + static_cast<int>(rng.uniform_int(vocab_size - Vocab::kNumSpecials));
    }
  }
  return m;
}

struct PairItem {
  std::vector<int> ids;         // possibly masked
  std::vector<int> mlm_labels;  // kIgnoreLabel everywhere for mismatched pairs
  std::size_t text_record;
  std::size_t image_record;
  int itm_label;  // 1 iff text and image come from the same record
};

struct PairBatch {
  std::vector<PairItem> items;
  std::uint64_t rng_seed = 0;

  std::size_t matched() const {
    return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& i) { return i.itm_label == 1; }));
  }
  std::size_t masked_positions() const {
    std::size_t n = 0;
    for (const auto& it : items)
      if (it.itm_label == 1)
        for (int l : it.mlm_labels) n += l != kIgnoreLabel;
    return n;
  }
};

/// Draws a batch of captions; each is paired with its own image with
/// probability 1 - neg_fraction, otherwise with a different record's image.
/// Every caption is masked; MLM labels are kept only for matched pairs so
/// the presence of [MASK] carries no matching signal.
inline PairBatch sample_itm_batch(const Corpus& corpus, std::size_t batch_size, double neg_fraction, double mask_rate,
                                  const Vocab& vocab, std::size_t max_text_len, Rng& rng) {
  if (!(neg_fraction > 0 && neg_fraction < 1)) throw std::invalid_argument("sample_itm_batch: neg_fraction must be in (0, 1)");
  if (corpus.size() < 2) throw std::invalid_argument("sample_itm_batch: corpus needs at least 2 records to draw negatives");
  PairBatch batch;
  batch.items.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t text = rng.uniform_int(corpus.size());
    const bool negative = rng.bernoulli(neg_fraction);
    std::size_t image = text;
    if (negative) {
      image = rng.uniform_int(corpus.size() - 1);
      if (image >= text) ++image;
    }
    auto masked = mask_tokens(vocab.encode(corpus[text].caption, max_text_len), mask_rate, vocab.size(), rng);
    if (negative) std::fill(masked.labels.begin(), masked.labels.end(), kIgnoreLabel);
    batch.items.push_back({std::move(masked.ids), std::move(masked.labels), text, image, negative ? 0 : 1});
  }
  return batch;
}

template <class T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> mlm;
  Tensor<T> itm;
};

/// mlm_weight * (mean CE over every masked position of the matched items)
/// + itm_weight * (mean ITM CE over all items), given each item's fusion
/// state in batch order.
template <class T>
LossParts<T> batch_loss(const PairBatch& batch, const std::vector<FusionState<T>>& states, const ModelConfig& c,
                        const ParamView<T>& p, double mlm_weight = 1.0, double itm_weight = 1.0) {
  if (batch.items.empty()) throw std::invalid_argument("pretrain_step_loss: empty batch");
  if (batch.matched() == 0) throw std::invalid_argument("pretrain_step_loss: batch has no matched pairs for MLM");
  if (batch.masked_positions() == 0) throw std::invalid_argument("pretrain_step_loss: batch has no masked positions");
  if (states.size() != batch.items.size()) throw std::invalid_argument("batch_loss: one fusion state per item required");
  std::vector<Tensor<T>> mlm_rows, itm_rows;
  std::vector<int> mlm_targets, itm_targets;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& item = batch.items[i];
    itm_rows.push_back(itm_logits(states[i], p, c.itm_pooling));
    itm_targets.push_back(item.itm_label);
    if (item.itm_label == 1 && std::any_of(item.mlm_labels.begin(), item.mlm_labels.end(), [](int l) { return l != kIgnoreLabel; })) {
      mlm_rows.push_back(mlm_logits(states[i], p));
      mlm_targets.insert(mlm_targets.end(), item.mlm_labels.begin(), item.mlm_labels.end());
    }
  }
  auto mlm = cross_entropy(mlm_rows.size() == 1 ? mlm_rows.front() : concat(mlm_rows, 0), std::span<const int>(mlm_targets));
  auto itm = cross_entropy(itm_rows.size() == 1 ? itm_rows.front() : concat(itm_rows, 0), std::span<const int>(itm_targets));
  auto total = add(scale(mlm, static_cast<T>(mlm_weight)), scale(itm, static_cast<T>(itm_weight)));
  return {std::move(total), std::move(mlm), std::move(itm)};
}

template <class T>
LossParts<T> pretrain_step_loss(const PairBatch& batch, const Corpus& corpus, const ModelConfig& c, const ParamView<T>& p,
                                double mlm_weight = 1.0, double itm_weight = 1.0,
                                std::vector<FusionState<T>>* states = nullptr) {
  if (batch.matched() == 0) throw std::invalid_argument("pretrain_step_loss: batch has no matched pairs for MLM");
  if (batch.masked_positions() == 0) throw std::invalid_argument("pretrain_step_loss: batch has no masked positions");
  std::vector<FusionState<T>> own;
  auto& out = states ? *states : own;
  out.clear();
  for (const auto& item : batch.items)
    out.push_back(forward_pair(item.ids, corpus[item.image_record].image.template cast<T>(), c, p).fusion);
  return batch_loss(batch, out, c, p, mlm_weight, itm_weight);
}

}  // namespace crossgate

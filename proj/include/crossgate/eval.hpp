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
#include <vector>

#include "crossgate/corpus.hpp"
#include "crossgate/pretraining.hpp"

namespace crossgate {

/// Generator seed of the held-out corpus paired with a run seed.
inline std::uint64_t held_out_seed(std::uint64_t seed) { return Rng::derive(seed, {0x4E1D}).next_u64(); }

struct ItmEval {
  std::size_t items = 0;
  std::size_t positives = 0;
  double accuracy = 0;
  std::size_t queries = 0;
  double recall_at_1 = 0;
};

/// logit(matched) - logit(mismatched) for one caption/image pair.
inline double itm_score(const std::string& caption, const Tensor<double>& image, const ModelConfig& c, const ParamView<double>& p) {
  const auto ids = corpus_vocab().encode(caption, c.max_text_len);
  const auto logits = itm_logits(forward_pair(ids, image, c, p).fusion, p, c.itm_pooling);
  return logits[1] - logits[0];
}

/// ITM accuracy over `items` unmasked pairs, exactly half of them
/// matched (negatives pair the caption with an image of another caption), and recall@1 of the true image among `candidates` images for
/// `queries` captions. Distractor images come from records whose caption
/// differs from the query's, so every query has one correct answer.
inline ItmEval eval_itm(const ParamStore& params, const ModelConfig& c, const Corpus& corpus, std::uint64_t seed,
                        std::size_t items = 1000, std::size_t queries = 100, std::size_t candidates = 8) {
  if (corpus.size() < 2) throw std::invalid_argument("eval_itm: corpus needs at least 2 records");
  if (std::all_of(corpus.records.begin(), corpus.records.end(), [&](const auto& r) { return r.caption == corpus[0].caption; }))
    throw std::invalid_argument("eval_itm: corpus needs at least 2 distinct captions");
  const ParamView<double> p(params.values());
  Rng rng = Rng::derive(seed, {0xE7A1});
  ItmEval r;
  r.items = items;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items; ++i) {
    const bool positive = i < items / 2;
    const std::size_t text = rng.uniform_int(corpus.size());
    std::size_t image = text;
    while (!positive && corpus[image].caption == corpus[text].caption) image = rng.uniform_int(corpus.size());
    r.positives += positive;
    const double score = itm_score(corpus[text].caption, corpus[image].image, c, p);
    correct += (score > 0) == positive;
  }
  r.accuracy = items ? static_cast<double>(correct) / static_cast<double>(items) : 0.0;

  std::size_t hits = 0;
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t text = rng.uniform_int(corpus.size());
    const auto& caption = corpus[text].caption;
    std::vector<std::size_t> pool;
    for (std::size_t k = 0; k < corpus.size(); ++k)
      if (corpus[k].caption != caption) pool.push_back(k);
    if (pool.size() + 1 < candidates) throw std::invalid_argument("eval_itm: corpus too small for the candidate set");
    rng.shuffle(pool.begin(), pool.end());
    const double truth = itm_score(caption, corpus[text].image, c, p);
    bool hit = true;
    for (std::size_t k = 0; k + 1 < candidates && hit; ++k) hit = itm_score(caption, corpus[pool[k]].image, c, p) < truth;
    hits += hit;
  }
  r.queries = queries;
  r.recall_at_1 = queries ? static_cast<double>(hits) / static_cast<double>(queries) : 0.0;
  return r;
}

}  // namespace crossgate

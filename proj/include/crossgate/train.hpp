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
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include <json.hpp>

#include "crossgate/checkpoint.hpp"
#include "crossgate/corpus.hpp"
#include "crossgate/optim.hpp"
#include "crossgate/pretraining.hpp"

namespace crossgate {

/// Running min/max/mean of gate values for one bridge.
struct GateSummary {
  double sum = 0;
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::uint64_t count = 0;

  void add(std::span<const double> values) {
    for (double v : values) {
      sum += v;
      min = std::min(min, v);
      max = std::max(max, v);
    }
    count += values.size();
  }
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0;
  double mlm = 0;
  double itm = 0;
  double lr = 0;
  double grad_norm = 0;
  double itm_accuracy = 0;
  std::map<GateKey, GateSummary> gates;
};

inline nlohmann::ordered_json metrics_record(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["loss"] = m.loss;
  j["mlm"] = m.mlm;
  j["itm"] = m.itm;
  j["lr"] = m.lr;
  j["grad_norm"] = m.grad_norm;
  j["itm_acc"] = m.itm_accuracy;
  GateSummary all;
  for (const auto& [k, g] : m.gates) {
    all.sum += g.sum;
    all.count += g.count;
    all.min = std::min(all.min, g.min);
    all.max = std::max(all.max, g.max);
  }
  if (all.count) {
    j["gate_mean"] = all.mean();
    j["gate_min"] = all.min;
    j["gate_max"] = all.max;
  }
  return j;
}

inline nlohmann::ordered_json gate_record(std::uint64_t step, const GateKey& k, const GateSummary& g) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["layer"] = k.layer;
  j["modality"] = std::string(to_string(k.modality));
  j["source"] = k.source;
  j["mean"] = g.mean();
  j["min"] = g.min;
  j["max"] = g.max;
  return j;
}

/// Batch for a given step, drawn from (seed, step) alone so that a resumed
/// run sees the same data as an uninterrupted one. Redraws when the batch
/// has no matched pair or no masked word.
inline PairBatch batch_for_step(const RunConfig& cfg, const Corpus& corpus, std::uint64_t step) {
  Rng rng = Rng::derive(cfg.seed, {0xBA7C, step});
  const auto vocab = corpus_vocab();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto b = sample_itm_batch(corpus, cfg.train.batch_size, cfg.train.neg_fraction, cfg.train.mask_rate, vocab,
                              cfg.model.max_text_len, rng);
    if (b.matched() > 0 && b.masked_positions() > 0) {
      b.rng_seed = step;
      return b;
    }
  }
  throw std::runtime_error("batch_for_step: could not draw a batch with masked words at step " + std::to_string(step));
}

/// Reads each parameter's gradient back by name.
inline TensorMap<double> named_gradients(const ParamView<double>& view, const Gradients<double>& grads) {
  TensorMap<double> out;
  for (const auto& [name, leaf] : view.watched())
    if (auto g = grads.find(leaf)) out.emplace(name, std::move(*g));
  return out;
}

/// Parameters, optimizer state and step of a run in progress.
struct TrainState {
  RunConfig config;
  ParamStore params;
  OptimState optim;
  std::uint64_t step = 0;

  static TrainState fresh(const RunConfig& cfg) {
    cfg.validate();
    TrainState s{cfg, ParamStore::init(cfg.model, cfg.seed), {}, 0};
    s.optim = OptimState::zeros_like(s.params);
    return s;
  }
  static TrainState from(Checkpoint ck) {
    return {std::move(ck.config), std::move(ck.params), std::move(ck.optim), ck.step};
  }
  Checkpoint checkpoint() const { return {config, step, params, optim}; }
};

/// One optimizer step: sample, forward, backward, clip, AdamW.
inline StepMetrics train_step(TrainState& s, const Corpus& corpus) {
  const auto& cfg = s.config;
  if (s.step >= cfg.train.total_steps) throw std::logic_error("train_step: run already finished");
  const std::uint64_t step = s.step + 1;
  const auto batch = batch_for_step(cfg, corpus, step);

  Tape<double> tape;
  const ParamView<double> view(s.params.values(), &tape);
  std::vector<FusionState<double>> states;
  const auto loss = pretrain_step_loss(batch, corpus, cfg.model, view, cfg.train.mlm_weight, cfg.train.itm_weight, &states);

  StepMetrics m;
  m.step = step;
  m.loss = loss.total.item();
  m.mlm = loss.mlm.item();
  m.itm = loss.itm.item();
  if (!std::isfinite(m.loss))
    throw NumericError("non-finite loss at step " + std::to_string(step) + " (mlm " + std::to_string(m.mlm) + ", itm " +
                       std::to_string(m.itm) + ")");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (const auto& [k, g] : states[i].gates) m.gates[k].add(g.data());
    const auto logits = itm_logits(states[i], ParamView<double>(s.params.values()), cfg.model.itm_pooling);
    correct += (logits[1] > logits[0]) == (batch.items[i].itm_label == 1);
  }
  m.itm_accuracy = static_cast<double>(correct) / static_cast<double>(states.size());

  auto grads = named_gradients(view, tape.backward(loss.total, Retain::leaves));
  m.grad_norm = clip_grad_norm(grads, cfg.train.clip_norm);
  m.lr = lr_at_step(step, cfg.train.total_steps, cfg.train.base_lr, cfg.train.warmup_fraction);
  adamw_step(s.params, grads, s.optim, m.lr, cfg.train);
  s.step = step;
  return m;
}

struct TrainOutputs {
  std::filesystem::path dir;  // metrics.jsonl, gates.jsonl, checkpoints
  bool force = false;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
  return dir / ("step-" + std::to_string(step) + ".ckpt");
}

/// Runs from s.step to total_steps (or `stop_at`, if earlier), writing one
/// metrics line and one gate line per bridge per step, a checkpoint every
/// checkpoint_every steps, and final.ckpt at the end.
inline void train_loop(TrainState& s, const Corpus& corpus, const TrainOutputs& out,
                       std::optional<std::uint64_t> stop_at = std::nullopt) {
  const auto last = std::min<std::uint64_t>(stop_at.value_or(s.config.train.total_steps), s.config.train.total_steps);
  if (std::filesystem::exists(out.dir / "metrics.jsonl") && !out.force)
    throw std::runtime_error("output '" + out.dir.string() + "' already holds a run (use --force to overwrite)");
  std::filesystem::create_directories(out.dir);
  std::ofstream metrics(out.dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream gates(out.dir / "gates.jsonl", std::ios::trunc);
  if (!metrics || !gates) throw std::runtime_error("cannot write logs in '" + out.dir.string() + "'");
  while (s.step < last) {
    const auto m = train_step(s, corpus);
    metrics << metrics_record(m).dump() << '\n';
    for (const auto& [k, g] : m.gates) gates << gate_record(m.step, k, g).dump() << '\n';
    if (s.config.train.checkpoint_every && m.step % s.config.train.checkpoint_every == 0)
      save_checkpoint(checkpoint_path(out.dir, m.step), s.checkpoint());
  }
  metrics.flush();
  gates.flush();
  save_checkpoint(out.dir / "final.ckpt", s.checkpoint());
}

}  // namespace crossgate

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

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossgate/corpus.hpp"
#include "crossgate/pretraining.hpp"
#include "crossgate/tensor_table.hpp"

namespace crossgate {

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix used by the analysis tools.
struct Grid {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

/// Linear CKA between n x p and n x q feature matrices (rows are examples):
/// ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F), clamped to [0, 1].
inline double linear_cka(const Grid& x, const Grid& y) {
  if (x.rows != y.rows) throw AnalysisError("linear_cka: " + std::to_string(x.rows) + " vs " + std::to_string(y.rows) + " examples");
  if (x.rows < 2) throw AnalysisError("linear_cka: need at least 2 examples");
  auto center = [](const Grid& m) {
    Grid c = m;
    for (std::size_t j = 0; j < m.cols; ++j) {
      double mu = 0;
      for (std::size_t i = 0; i < m.rows; ++i) mu += m(i, j);
      mu /= static_cast<double>(m.rows);
      for (std::size_t i = 0; i < m.rows; ++i) c(i, j) -= mu;
    }
    return c;
  };
  // ||A^T B||_F^2
  auto cross = [](const Grid& a, const Grid& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.cols; ++i)
      for (std::size_t j = 0; j < b.cols; ++j) {
        double d = 0;
        for (std::size_t k = 0; k < a.rows; ++k) d += a(k, i) * b(k, j);
        s += d * d;
      }
    return s;
  };
  const Grid xc = center(x), yc = center(y);
  const double xx = std::sqrt(cross(xc, xc)), yy = std::sqrt(cross(yc, yc));
  if (!(xx > 0) || !(yy > 0)) throw AnalysisError("linear_cka: constant feature matrix (zero norm after centering)");
  return std::clamp(cross(xc, yc) / (xx * yy), 0.0, 1.0);
}

/// Per-head attention-weighted distance from each query to the keys,
/// averaged over queries. Positions are one row per sequence element with
/// one (token index) or two (patch-grid row, col) coordinates; the first
/// `skip_queries` queries are left out of the average.
inline std::vector<double> avg_attention_distance(const Tensor<double>& probs, const Grid& q_pos, const Grid& k_pos,
                                                  std::size_t skip_queries = 0) {
  if (probs.rank() != 3) throw AnalysisError("avg_attention_distance: expected heads x Sq x Sk, got " + probs.shape().str());
  const std::size_t heads = probs.dim(0), sq = probs.dim(1), sk = probs.dim(2);
  if (q_pos.rows != sq || k_pos.rows != sk || q_pos.cols != k_pos.cols)
    throw AnalysisError("avg_attention_distance: position tables do not match " + probs.shape().str());
  if (skip_queries >= sq) throw AnalysisError("avg_attention_distance: no queries left after skipping");
  Grid dist(sq, sk);
  for (std::size_t q = 0; q < sq; ++q)
    for (std::size_t k = 0; k < sk; ++k) {
      double s = 0;
      for (std::size_t a = 0; a < q_pos.cols; ++a) s += (q_pos(q, a) - k_pos(k, a)) * (q_pos(q, a) - k_pos(k, a));
      dist(q, k) = std::sqrt(s);
    }
  std::vector<double> out(heads, 0.0);
  const auto p = probs.data();
  for (std::size_t h = 0; h < heads; ++h) {
    double total = 0;
    for (std::size_t q = 0; q < sq; ++q) {
      const double* row = p.data() + (h * sq + q) * sk;
      double mass = 0, d = 0;
      for (std::size_t k = 0; k < sk; ++k) {
        mass += row[k];
        d += row[k] * dist(q, k);
      }
      if (std::abs(mass - 1.0) > 1e-6)
        throw AnalysisError("avg_attention_distance: head " + std::to_string(h) + " query " + std::to_string(q) +
                            " sums to " + std::to_string(mass));
      if (q >= skip_queries) total += d;
    }
    out[h] = total / static_cast<double>(sq - skip_queries);
  }
  return out;
}

/// Token index per text position.
inline Grid text_positions(std::size_t len) {
  Grid g(len, 1);
  for (std::size_t i = 0; i < len; ++i) g(i, 0) = static_cast<double>(i);
  return g;
}

/// Patch-grid (row, col) per visual position; the class token sits at (0, 0).
inline Grid visual_positions(std::size_t grid_h, std::size_t grid_w) {
  Grid g(grid_h * grid_w + 1, 2);
  for (std::size_t k = 0; k < grid_h * grid_w; ++k) {
    g(k + 1, 0) = static_cast<double>(k / grid_w);
    g(k + 1, 1) = static_cast<double>(k % grid_w);
  }
  return g;
}

/// Mean/min/max and a 10-bin histogram over (0, 1) of one bridge's gates.
struct GateStats {
  std::uint64_t count = 0;
  double sum = 0;
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::array<std::uint64_t, 10> histogram{};

  void add(std::span<const double> values) {
    for (double v : values) {
      ++count;
      sum += v;
      min = std::min(min, v);
      max = std::max(max, v);
      ++histogram[std::min<std::size_t>(9, static_cast<std::size_t>(std::max(0.0, v) * 10))];
    }
  }
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

/// Sequence features of one example, values only.
struct DumpExample {
  std::size_t record = 0;
  std::vector<Tensor<double>> text;           // T_0..T_{L_T}
  std::vector<Tensor<double>> visual;         // V_0..V_{L_V}
  std::vector<Tensor<double>> fusion_text;    // Z^T_1..Z^T_{L_F}
  std::vector<Tensor<double>> fusion_visual;  // Z^V_1..Z^V_{L_F}
  std::vector<Tensor<double>> text_attn;      // per text layer, heads x S x S
  std::vector<Tensor<double>> visual_attn;
  std::vector<FusionAttention<double>> fusion_attn;
  std::map<GateKey, Tensor<double>> gates;
};

/// Activations of a set of matched pairs under one checkpoint.
struct ActivationDump {
  std::string source;  // identifies the checkpoint
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<DumpExample> examples;

  void save(const std::filesystem::path& path) const;
  static ActivationDump load(const std::filesystem::path& path);
};

/// Forward passes over the first n records of `corpus` (captions unmasked).
inline ActivationDump make_dump(const ParamStore& params, const ModelConfig& c, const Corpus& corpus, std::size_t n,
                                std::string source) {
  if (n == 0 || n > corpus.size()) throw AnalysisError("make_dump: need 1.." + std::to_string(corpus.size()) + " examples");
  const ParamView<double> p(params.values());
  ActivationDump d{std::move(source), c.patch_grid_h(), c.patch_grid_w(), {}};
  const auto vocab = corpus_vocab();
  for (std::size_t i = 0; i < n; ++i) {
    const auto fwd = forward_pair(vocab.encode(corpus[i].caption, c.max_text_len), corpus[i].image, c, p);
    DumpExample e;
    e.record = i;
    for (std::size_t k = 0; k <= fwd.trace.text.layers.size(); ++k) e.text.push_back(fwd.trace.text.at(k));
    for (std::size_t k = 0; k <= fwd.trace.visual.layers.size(); ++k) e.visual.push_back(fwd.trace.visual.at(k));
    e.fusion_text = fwd.fusion.z_text;
    e.fusion_visual = fwd.fusion.z_visual;
    e.text_attn = fwd.trace.text.attn;
    e.visual_attn = fwd.trace.visual.attn;
    e.fusion_attn = fwd.fusion.attn;
    e.gates = fwd.fusion.gates;
    d.examples.push_back(std::move(e));
  }
  return d;
}

enum class Stream { text, visual, fusion_text, fusion_visual };

inline Stream parse_stream(std::string_view s) {
  if (s == "text") return Stream::text;
  if (s == "visual") return Stream::visual;
  if (s == "fusion-text") return Stream::fusion_text;
  if (s == "fusion-visual") return Stream::fusion_visual;
  throw AnalysisError("unknown stream '" + std::string(s) + "' (expected text, visual, fusion-text, fusion-visual)");
}

/// Layers of a stream as stored in an example: uni-modal streams list
/// layers 1..L (the embedded input is excluded), fusion streams 1..L_F.
inline const std::vector<Tensor<double>>& stream_layers(const DumpExample& e, Stream s) {
  switch (s) {
    case Stream::text: return e.text;
    case Stream::visual: return e.visual;
    case Stream::fusion_text: return e.fusion_text;
    case Stream::fusion_visual: return e.fusion_visual;
  }
  throw AnalysisError("unknown stream");
}

inline std::size_t stream_depth(const ActivationDump& d, Stream s) {
  if (d.examples.empty()) throw AnalysisError("empty activation dump");
  const auto n = stream_layers(d.examples.front(), s).size();
  return s == Stream::text || s == Stream::visual ? n - 1 : n;
}

/// n x D features of `layer` (1-based), one pooled row per example.
inline Grid layer_features(const ActivationDump& d, Stream s, std::size_t layer, Pooling pooling) {
  const std::size_t offset = s == Stream::text || s == Stream::visual ? 0 : 1;
  Grid g;
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    const auto& t = stream_layers(d.examples[i], s).at(layer - offset);
    if (i == 0) g = Grid(d.examples.size(), t.dim(1));
    for (std::size_t j = 0; j < t.dim(1); ++j) {
      double v = 0;
      if (pooling == Pooling::first_token) {
        v = t.at({0, j});
      } else {
        for (std::size_t r = 0; r < t.dim(0); ++r) v += t.at({r, j});
        v /= static_cast<double>(t.dim(0));
      }
      g(i, j) = v;
    }
  }
  return g;
}

/// Entry (i, j) = CKA of layer i of `a` against layer j of `b`.
inline Grid cka_layer_matrix(const ActivationDump& d, Stream a, Stream b, Pooling pooling = Pooling::first_token,
                             std::size_t min_examples = 64) {
  if (d.examples.size() < min_examples)
    throw AnalysisError("cka_layer_matrix: dump has " + std::to_string(d.examples.size()) + " examples, need " +
                        std::to_string(min_examples));
  const std::size_t la = stream_depth(d, a), lb = stream_depth(d, b);
  std::vector<Grid> fa, fb;
  for (std::size_t i = 1; i <= la; ++i) fa.push_back(layer_features(d, a, i, pooling));
  for (std::size_t j = 1; j <= lb; ++j) fb.push_back(layer_features(d, b, j, pooling));
  Grid m(la, lb);
  for (std::size_t i = 0; i < la; ++i)
    for (std::size_t j = 0; j < lb; ++j) m(i, j) = (a == b && j < i) ? m(j, i) : linear_cka(fa[i], fb[j]);
  return m;
}

/// Whitespace-separated values, one matrix row per line.
inline void write_grid(std::ostream& out, const Grid& g) {
  char buf[64];
  for (std::size_t i = 0; i < g.rows; ++i) {
    for (std::size_t j = 0; j < g.cols; ++j) {
      auto r = std::to_chars(buf, buf + sizeof buf, g(i, j));
      if (j) out << ' ';
      out.write(buf, r.ptr - buf);
    }
    out << '\n';
  }
}

/// Rows: layers; columns: heads. Self-attention only, start/class tokens
/// excluded as queries, averaged over examples.
inline Grid attention_distance_matrix(const ActivationDump& d, Stream s) {
  if (d.examples.empty()) throw AnalysisError("empty activation dump");
  const bool visual = s == Stream::visual || s == Stream::fusion_visual;
  Grid out;
  for (const auto& e : d.examples) {
    std::vector<const Tensor<double>*> layers;
    switch (s) {
      case Stream::text:
        for (const auto& a : e.text_attn) layers.push_back(&a);
        break;
      case Stream::visual:
        for (const auto& a : e.visual_attn) layers.push_back(&a);
        break;
      case Stream::fusion_text:
        for (const auto& a : e.fusion_attn) layers.push_back(&a.text_msa);
        break;
      case Stream::fusion_visual:
        for (const auto& a : e.fusion_attn) layers.push_back(&a.visual_msa);
        break;
    }
    if (layers.empty()) throw AnalysisError("attention distance: stream has no attention layers");
    if (out.rows == 0) out = Grid(layers.size(), layers.front()->dim(0));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& probs = *layers[l];
      const Grid pos = visual ? visual_positions(d.grid_h, d.grid_w) : text_positions(probs.dim(1));
      const auto per_head = avg_attention_distance(probs, pos, pos, 1);
      for (std::size_t h = 0; h < per_head.size(); ++h) out(l, h) += per_head[h];
    }
  }
  for (auto& v : out.v) v /= static_cast<double>(d.examples.size());
  return out;
}

/// Gate summaries over every example of a dump.
inline std::map<GateKey, GateStats> gate_statistics(const ActivationDump& d) {
  std::map<GateKey, GateStats> out;
  for (const auto& e : d.examples)
    for (const auto& [k, g] : e.gates) out[k].add(g.data());
  return out;
}

inline nlohmann::ordered_json gate_stats_record(const GateKey& k, const GateStats& g) {
  nlohmann::ordered_json j;
  j["layer"] = k.layer;
  j["modality"] = std::string(to_string(k.modality));
  j["source"] = k.source;
  j["mean"] = g.mean();
  j["min"] = g.min;
  j["max"] = g.max;
  j["count"] = g.count;
  j["histogram"] = g.histogram;
  return j;
}

namespace detail {

inline std::string dump_key(std::size_t i, const std::string& what) { return "ex" + std::to_string(i) + "." + what; }

inline std::string gate_name(const GateKey& k) {
  return "gate.l" + std::to_string(k.layer) + "." + std::string(to_string(k.modality)) + ".s" + std::to_string(k.source);
}

}  // namespace detail

/// Tensor table of kind "dump" with a "meta" section (JSON: source, grid,
/// per-example record ids, depths and sequence lengths) and one tensor per
/// stored activation, named ex<i>.<field>.
inline void ActivationDump::save(const std::filesystem::path& path) const {
  TensorTable t;
  t.kind = "dump";
  nlohmann::ordered_json meta;
  meta["source"] = source;
  meta["grid_h"] = grid_h;
  meta["grid_w"] = grid_w;
  meta["examples"] = examples.size();
  auto& ex = meta["items"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    nlohmann::ordered_json j;
    j["record"] = e.record;
    j["text_len"] = e.text.front().dim(0);
    j["visual_len"] = e.visual.front().dim(0);
    j["text_layers"] = e.text.size() - 1;
    j["visual_layers"] = e.visual.size() - 1;
    j["fusion_layers"] = e.fusion_text.size();
    auto& gates = j["gates"] = nlohmann::ordered_json::array();
    for (const auto& [k, g] : e.gates) gates.push_back({k.layer, std::string(to_string(k.modality)), k.source});
    ex.push_back(std::move(j));
    auto put = [&](const std::string& name, const Tensor<double>& v) { t.tensors.emplace_back(detail::dump_key(i, name), v); };
    for (std::size_t k = 0; k < e.text.size(); ++k) put("text." + std::to_string(k), e.text[k]);
    for (std::size_t k = 0; k < e.visual.size(); ++k) put("visual." + std::to_string(k), e.visual[k]);
    for (std::size_t k = 0; k < e.text_attn.size(); ++k) put("text_attn." + std::to_string(k + 1), e.text_attn[k]);
    for (std::size_t k = 0; k < e.visual_attn.size(); ++k) put("visual_attn." + std::to_string(k + 1), e.visual_attn[k]);
    for (std::size_t l = 0; l < e.fusion_text.size(); ++l) {
      const auto n = std::to_string(l + 1);
      put("fusion_text." + n, e.fusion_text[l]);
      put("fusion_visual." + n, e.fusion_visual[l]);
      put("fusion_attn." + n + ".text_msa", e.fusion_attn[l].text_msa);
      put("fusion_attn." + n + ".text_mca", e.fusion_attn[l].text_mca);
      put("fusion_attn." + n + ".visual_msa", e.fusion_attn[l].visual_msa);
      put("fusion_attn." + n + ".visual_mca", e.fusion_attn[l].visual_mca);
    }
    for (const auto& [k, g] : e.gates) put(detail::gate_name(k), g);
  }
  t.sections["meta"] = meta.dump();
  t.save(path);
}

inline ActivationDump ActivationDump::load(const std::filesystem::path& path) {
  const auto t = TensorTable::load(path, "dump");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(t.section("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dump: bad meta section: ") + e.what());
  }
  ActivationDump d;
  d.source = meta.at("source").get<std::string>();
  d.grid_h = meta.at("grid_h").get<std::size_t>();
  d.grid_w = meta.at("grid_w").get<std::size_t>();
  const auto& items = meta.at("items");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& j = items[i];
    DumpExample e;
    e.record = j.at("record").get<std::size_t>();
    auto get = [&](const std::string& name) { return t.tensor(detail::dump_key(i, name)); };
    const auto lt = j.at("text_layers").get<std::size_t>(), lv = j.at("visual_layers").get<std::size_t>();
    const auto lf = j.at("fusion_layers").get<std::size_t>();
    for (std::size_t k = 0; k <= lt; ++k) e.text.push_back(get("text." + std::to_string(k)));
    for (std::size_t k = 0; k <= lv; ++k) e.visual.push_back(get("visual." + std::to_string(k)));
    for (std::size_t k = 1; k <= lt; ++k) e.text_attn.push_back(get("text_attn." + std::to_string(k)));
    for (std::size_t k = 1; k <= lv; ++k) e.visual_attn.push_back(get("visual_attn." + std::to_string(k)));
    for (std::size_t l = 1; l <= lf; ++l) {
      const auto n = std::to_string(l);
      e.fusion_text.push_back(get("fusion_text." + n));
      e.fusion_visual.push_back(get("fusion_visual." + n));
      e.fusion_attn.push_back({get("fusion_attn." + n + ".text_msa"), get("fusion_attn." + n + ".text_mca"),
                               get("fusion_attn." + n + ".visual_msa"), get("fusion_attn." + n + ".visual_mca")});
    }
    for (const auto& g : j.at("gates")) {
      const GateKey k{g.at(0).get<std::size_t>(), g.at(1).get<std::string>() == "text" ? Modality::text : Modality::visual,
                      g.at(2).get<std::size_t>()};
      e.gates.emplace(k, get(detail::gate_name(k)));
    }
    d.examples.push_back(std::move(e));
  }
  return d;
}

}  // namespace crossgate

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
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace crossgate {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Which uni-modal layers feed each fusion layer's bridge.
enum class Topology {
  all_gated,    // every fusion layer sees every uni-modal layer
  same_layer,   // fusion layer l sees uni-modal layer L - L_F + l
  last_only,    // no bridges; only the initial fusion input carries uni-modal features
  bottom_only,  // only the first fusion layer sees every uni-modal layer
};

/// How a sequence is reduced to one vector for matching heads.
enum class Pooling { first_token, mean };

inline std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::all_gated: return "all-gated";
    case Topology::same_layer: return "same-layer";
    case Topology::last_only: return "last-only";
    case Topology::bottom_only: return "bottom-only";
  }
  return "?";
}

inline Topology parse_topology(std::string_view s) {
  if (s == "all-gated") return Topology::all_gated;
  if (s == "same-layer") return Topology::same_layer;
  if (s == "last-only") return Topology::last_only;
  if (s == "bottom-only") return Topology::bottom_only;
  throw ConfigError("unknown topology '" + std::string(s) + "' (expected all-gated, same-layer, last-only, bottom-only)");
}

inline std::string_view to_string(Pooling p) { return p == Pooling::first_token ? "first-token" : "mean"; }

inline Pooling parse_pooling(std::string_view s) {
  if (s == "first-token") return Pooling::first_token;
  if (s == "mean") return Pooling::mean;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected first-token, mean)");
}

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t visual_dim = 32;
  std::size_t text_dim = 32;
  std::size_t fusion_dim = 32;
  std::size_t visual_layers = 4;
  std::size_t text_layers = 4;
  std::size_t fusion_layers = 2;
  std::size_t uni_heads = 4;
  std::size_t fusion_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t patch = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 16;
  // 0 selects the default: one past the last uni-modal layer.
  std::size_t start_layer_text = 0;
  std::size_t start_layer_visual = 0;
  Topology topology = Topology::all_gated;
  bool per_layer_bridge_proj = false;
  Pooling itm_pooling = Pooling::first_token;
  std::size_t cls_classes = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  std::size_t patch_grid_h() const { return height / patch; }
  std::size_t patch_grid_w() const { return width / patch; }
  std::size_t patch_count() const { return patch_grid_h() * patch_grid_w(); }
  std::size_t patch_features() const { return channels * patch * patch; }
  std::size_t text_start() const { return start_layer_text ? start_layer_text : text_layers + 1; }
  std::size_t visual_start() const { return start_layer_visual ? start_layer_visual : visual_layers + 1; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("ModelConfig: " + m); };
    if (!visual_dim || !text_dim || !fusion_dim) fail("hidden dims must be >= 1");
    if (!patch || !height || !width || !channels) fail("image geometry must be >= 1");
    if (height % patch || width % patch) fail("height and width must be multiples of patch");
    if (!uni_heads || !fusion_heads) fail("head counts must be >= 1");
    if (fusion_dim % fusion_heads) fail("fusion_dim must be divisible by fusion_heads");
    if (visual_dim % uni_heads || text_dim % uni_heads) fail("uni-modal dims must be divisible by uni_heads");
    if (!ffn_mult) fail("ffn_mult must be >= 1");
    if (!fusion_layers) fail("fusion_layers must be >= 1");
    if (max_text_len < 3) fail("max_text_len must be >= 3");
    if (vocab_size < 6) fail("vocab_size must cover the five specials plus one word");
    if (text_start() < 1 || text_start() > text_layers + 1) fail("start_layer_text must be in [1, text_layers + 1]");
    if (visual_start() < 1 || visual_start() > visual_layers + 1) fail("start_layer_visual must be in [1, visual_layers + 1]");
    if (topology == Topology::same_layer && (text_layers < fusion_layers || visual_layers < fusion_layers))
      fail("same-layer topology needs at least fusion_layers uni-modal layers per modality");
    if (!(init_std > 0)) fail("init_std must be > 0");
    if (!(ln_eps > 0)) fail("ln_eps must be > 0");
  }

  /// Desk-scale preset used by tests and the acceptance run.
  static ModelConfig toy() {
    ModelConfig c;
    c.itm_pooling = Pooling::mean;
    return c;
  }

  /// Fusion encoder at the published base size; uni-modal towers at ViT-B/16
  /// and RoBERTa-base shape.
  static ModelConfig reference() {
    ModelConfig c;
    c.visual_dim = c.text_dim = c.fusion_dim = 768;
    c.visual_layers = c.text_layers = 12;
    c.fusion_layers = 6;
    c.uni_heads = c.fusion_heads = 12;
    c.ffn_mult = 4;
    c.patch = 16;
    c.height = c.width = 224;
    c.vocab_size = 50265;
    c.max_text_len = 50;
    return c;
  }
};

/// Optimization and data settings.
struct TrainConfig {
  std::size_t total_steps = 200;
  std::size_t batch_size = 32;
  double base_lr = 1e-3;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  double lr_mult_uni = 1.0;
  double lr_mult_cross = 5.0;
  double lr_mult_heads = 5.0;
  double neg_fraction = 0.5;
  double mask_rate = 0.15;
  double mlm_weight = 1.0;
  double itm_weight = 1.0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t corpus_size = 360;
  std::size_t eval_items = 1000;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("TrainConfig: " + m); };
    if (!batch_size) fail("batch_size must be >= 1");
    if (!(warmup_fraction > 0 && warmup_fraction < 1)) fail("warmup_fraction must be in (0, 1)");
    if (!(base_lr >= 0)) fail("base_lr must be >= 0");
    if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be > 0");
    if (!(clip_norm >= 0)) fail("clip_norm must be >= 0");
    if (!(lr_mult_uni >= 0 && lr_mult_cross >= 0 && lr_mult_heads >= 0)) fail("lr multipliers must be >= 0");
    if (!(neg_fraction > 0 && neg_fraction < 1)) fail("neg_fraction must be in (0, 1)");
    if (!(mask_rate > 0 && mask_rate < 1)) fail("mask_rate must be in (0, 1)");
    if (corpus_size < 2) fail("corpus_size must be >= 2");
  }
};

/// Everything a run needs; serialized as flat key=value text.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  std::uint64_t seed = 7;

  void validate() const {
    model.validate();
    train.validate();
  }

  std::string to_text() const;
  static RunConfig from_text(std::string_view text);
  static RunConfig load(const std::string& path);
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class U>
U parse_number(std::string_view key, std::string_view s) {
  U v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(s) + "'");
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(s) + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

// Ordered so serialization is stable.
inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto size_field = [&f](std::string key, auto member) {
      f.emplace_back(key, Field{[member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
                                [member, key](RunConfig& c, std::string_view s) { member(c) = parse_number<std::size_t>(key, s); }});
    };
    auto real_field = [&f](std::string key, auto member) {
      f.emplace_back(key, Field{[member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
                                [member, key](RunConfig& c, std::string_view s) { member(c) = parse_number<double>(key, s); }});
    };
#define CG_SIZE(key, expr) size_field(key, [](RunConfig& c) -> std::size_t& { return c.expr; })
#define CG_REAL(key, expr) real_field(key, [](RunConfig& c) -> double& { return c.expr; })
    f.emplace_back("seed", Field{[](const RunConfig& c) { return std::to_string(c.seed); },
                                 [](RunConfig& c, std::string_view s) { c.seed = parse_number<std::uint64_t>("seed", s); }});
    CG_SIZE("visual_dim", model.visual_dim);
    CG_SIZE("text_dim", model.text_dim);
    CG_SIZE("fusion_dim", model.fusion_dim);
    CG_SIZE("visual_layers", model.visual_layers);
    CG_SIZE("text_layers", model.text_layers);
    CG_SIZE("fusion_layers", model.fusion_layers);
    CG_SIZE("uni_heads", model.uni_heads);
    CG_SIZE("fusion_heads", model.fusion_heads);
    CG_SIZE("ffn_mult", model.ffn_mult);
    CG_SIZE("patch", model.patch);
    CG_SIZE("height", model.height);
    CG_SIZE("width", model.width);
    CG_SIZE("channels", model.channels);
    CG_SIZE("vocab_size", model.vocab_size);
    CG_SIZE("max_text_len", model.max_text_len);
    CG_SIZE("start_layer_text", model.start_layer_text);
    CG_SIZE("start_layer_visual", model.start_layer_visual);
    f.emplace_back("topology", Field{[](const RunConfig& c) { return std::string(to_string(c.model.topology)); },
                                     [](RunConfig& c, std::string_view s) { c.model.topology = parse_topology(s); }});
    f.emplace_back("per_layer_bridge_proj",
                   Field{[](const RunConfig& c) { return std::string(c.model.per_layer_bridge_proj ? "true" : "false"); },
                         [](RunConfig& c, std::string_view s) { c.model.per_layer_bridge_proj = parse_bool("per_layer_bridge_proj", s); }});
    f.emplace_back("itm_pooling", Field{[](const RunConfig& c) { return std::string(to_string(c.model.itm_pooling)); },
                                        [](RunConfig& c, std::string_view s) { c.model.itm_pooling = parse_pooling(s); }});
    CG_SIZE("cls_classes", model.cls_classes);
    CG_REAL("init_std", model.init_std);
    CG_REAL("ln_eps", model.ln_eps);
    CG_SIZE("total_steps", train.total_steps);
    CG_SIZE("batch_size", train.batch_size);
    CG_REAL("base_lr", train.base_lr);
    CG_REAL("warmup_fraction", train.warmup_fraction);
    CG_REAL("weight_decay", train.weight_decay);
    CG_REAL("beta1", train.beta1);
    CG_REAL("beta2", train.beta2);
    CG_REAL("adam_eps", train.adam_eps);
    CG_REAL("clip_norm", train.clip_norm);
    CG_REAL("lr_mult_uni", train.lr_mult_uni);
    CG_REAL("lr_mult_cross", train.lr_mult_cross);
    CG_REAL("lr_mult_heads", train.lr_mult_heads);
    CG_REAL("neg_fraction", train.neg_fraction);
    CG_REAL("mask_rate", train.mask_rate);
    CG_REAL("mlm_weight", train.mlm_weight);
    CG_REAL("itm_weight", train.itm_weight);
    CG_SIZE("checkpoint_every", train.checkpoint_every);
    CG_SIZE("corpus_size", train.corpus_size);
    CG_SIZE("eval_items", train.eval_items);
#undef CG_SIZE
#undef CG_REAL
    return f;
  }();
  return fields;
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + "=" + field.get(*this) + "\n";
  return out;
}

/// Parses key=value lines over the defaults. '#' starts a comment; unknown
/// keys are rejected. `start_layer` sets both per-modality start layers.
inline RunConfig RunConfig::from_text(std::string_view text) {
  RunConfig c;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key == "start_layer") {
      c.model.start_layer_text = c.model.start_layer_visual = detail::parse_number<std::size_t>(key, value);
      continue;
    }
    const auto& fields = detail::config_fields();
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end())
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    it->second.set(c, value);
  }
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

}  // namespace crossgate

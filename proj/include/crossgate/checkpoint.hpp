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

#include <filesystem>
#include <string>

#include "crossgate/config.hpp"
#include "crossgate/optim.hpp"
#include "crossgate/params.hpp"
#include "crossgate/tensor_table.hpp"

namespace crossgate {

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  ParamStore params;
  OptimState optim;
};

/// Tensor table of kind "checkpoint": section "config" holds the run
/// config text, section "state" the step and optimizer counters; tensors
/// are the parameters followed by optim.m.<name> and optim.v.<name>.
inline TensorTable checkpoint_table(const Checkpoint& ck) {
  TensorTable t;
  t.kind = "checkpoint";
  t.sections["config"] = ck.config.to_text();
  t.sections["state"] = "step=" + std::to_string(ck.step) + "\noptim_t=" + std::to_string(ck.optim.t) + "\n";
  for (const auto& s : ck.params.specs()) t.tensors.emplace_back(s.name, ck.params.at(s.name));
  for (const auto& s : ck.params.specs()) t.tensors.emplace_back("optim.m." + s.name, ck.optim.m.at(s.name));
  for (const auto& s : ck.params.specs()) t.tensors.emplace_back("optim.v." + s.name, ck.optim.v.at(s.name));
  return t;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { checkpoint_table(ck).save(path); }

namespace detail {

inline std::uint64_t state_field(const std::string& text, const std::string& key) {
  const auto at = text.find(key + "=");
  if (at == std::string::npos) throw FormatError("checkpoint: state section lacks '" + key + "'");
  const auto end = text.find('\n', at);
  return parse_number<std::uint64_t>(key, std::string_view(text).substr(at + key.size() + 1, end - at - key.size() - 1));
}

}  // namespace detail

/// Strict: every parameter and moment of the stored config must be present
/// with its registered shape, and no other tensor may appear.
inline Checkpoint checkpoint_from_table(const TensorTable& t) {
  if (t.kind != "checkpoint") throw FormatError("checkpoint: table kind is '" + t.kind + "'");
  Checkpoint ck;
  ck.config = RunConfig::from_text(t.section("config"));
  ck.config.validate();
  const auto& state = t.section("state");
  ck.step = detail::state_field(state, "step");
  ck.params = ParamStore::init(ck.config.model, ck.config.seed);
  ck.optim = OptimState::zeros_like(ck.params);
  ck.optim.t = detail::state_field(state, "optim_t");

  std::set<std::string, std::less<>> filled;
  for (std::size_t i = 0; i < t.tensors.size(); ++i) {
    const auto& [name, value] = t.tensors[i];
    const std::string where = i < t.offsets.size() ? " at byte " + std::to_string(t.offsets[i]) : "";
    TensorMap<double>* moments = nullptr;
    std::string param = name;
    if (name.rfind("optim.m.", 0) == 0) {
      moments = &ck.optim.m;
      param = name.substr(8);
    } else if (name.rfind("optim.v.", 0) == 0) {
      moments = &ck.optim.v;
      param = name.substr(8);
    }
    if (!ck.params.contains(param)) throw FormatError("checkpoint: unknown tensor '" + name + "'" + where);
    if (!filled.insert(name).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'" + where);
    if (value.shape() != ck.params.at(param).shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + value.shape().str() + ", expected " +
                        ck.params.at(param).shape().str() + where);
    if (moments)
      moments->at(param) = value;
    else
      ck.params.set(param, value);
  }
  const std::size_t want = 3 * ck.params.specs().size();
  if (filled.size() != want) {
    for (const auto& s : ck.params.specs())
      for (const std::string& n : {s.name, "optim.m." + s.name, "optim.v." + s.name})
        if (!filled.count(n)) throw FormatError("checkpoint: missing tensor '" + n + "'");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_table(TensorTable::load(path, "checkpoint"));
}

}  // namespace crossgate

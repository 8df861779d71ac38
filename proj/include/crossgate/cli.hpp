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

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "crossgate/analysis.hpp"
#include "crossgate/eval.hpp"
#include "crossgate/model_gradcheck.hpp"
#include "crossgate/train.hpp"

namespace crossgate {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

namespace detail {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

/// --config, then CROSSGATE_CONFIG, then built-in defaults; --set lines and
/// --seed are applied on top.
inline RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg;
  std::string path = f.config;
  if (path.empty())
    if (const char* env = std::getenv("CROSSGATE_CONFIG")) path = env;
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  for (const auto& o : f.overrides) text += "\n" + o;
  cfg = RunConfig::from_text(text);
  if (f.seed) cfg.seed = *f.seed;
  cfg.validate();
  return cfg;
}

inline void claim_output(const std::filesystem::path& p, bool force) {
  if (std::filesystem::exists(p) && !force)
    throw std::runtime_error("output '" + p.string() + "' already exists (use --force to overwrite)");
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << s;
}

inline Corpus corpus_or_generated(const std::string& dir, const RunConfig& cfg, std::uint64_t seed) {
  if (!dir.empty()) return load_corpus(dir);
  return generate_corpus(cfg.train.corpus_size, cfg.model, seed);
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"crossgate: two-tower vision-language model with gated bridges", "crossgate"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  detail::CommonFlags common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Run config file (key=value); CROSSGATE_CONFIG is used when absent");
    sub->add_option("--set", common.overrides, "Config override key=value, repeatable");
    sub->add_option("--seed", common.seed, "Seed for all randomness (overrides config)");
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
  };

  std::string in, out_path, data, resume, self_stream, pooling = "first-token";
  std::vector<std::string> pair;
  std::size_t n = 0, coords = 50, items = 0, queries = 100;
  bool held_out = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic caption/image corpus");
  add_common(gen);
  gen->add_option("--out", out_path, "Corpus directory")->required();
  gen->add_option("--n", n, "Record count (default: corpus_size)");
  gen->add_flag("--held-out", held_out, "Use the held-out generator seed derived from --seed");

  auto* pre = app.add_subcommand("pretrain", "Pretrain with MLM + ITM");
  add_common(pre);
  pre->add_option("--in", in, "Corpus directory (default: generate corpus_size records from the seed)");
  pre->add_option("--out", out_path, "Run directory for logs and checkpoints")->required();
  pre->add_option("--resume", resume, "Checkpoint to resume from (its config is used)");

  auto* ev = app.add_subcommand("eval-itm", "ITM accuracy and recall@1 of a checkpoint");
  add_common(ev);
  ev->add_option("--in", in, "Checkpoint")->required();
  ev->add_option("--data", data, "Corpus directory (default: held-out corpus for the checkpoint's seed)");
  ev->add_option("--items", items, "Balanced ITM items (default: eval_items)");
  ev->add_option("--queries", queries, "Recall@1 queries");
  ev->add_option("--out", out_path, "JSON result file");

  auto* dump = app.add_subcommand("dump-activations", "Record activations, attention and gates");
  add_common(dump);
  dump->add_option("--in", in, "Checkpoint")->required();
  dump->add_option("--data", data, "Corpus directory (default: held-out corpus for the checkpoint's seed)");
  dump->add_option("--n", n, "Examples (default 64)");
  dump->add_option("--out", out_path, "Dump file")->required();

  auto* cka = app.add_subcommand("cka", "Layer-by-layer linear CKA grid");
  add_common(cka);
  cka->add_option("--in", in, "Dump file")->required();
  auto* self_opt = cka->add_option("--self", self_stream, "Stream against itself: text, visual, fusion-text, fusion-visual");
  auto* pair_opt = cka->add_option("--pair", pair, "Two streams")->expected(2);
  self_opt->excludes(pair_opt);
  cka->add_option("--pooling", pooling, "first-token or mean");
  cka->add_option("--out", out_path, "Grid file (default: stdout)");

  auto* attn = app.add_subcommand("attn-distance", "Average attention distance per layer and head");
  add_common(attn);
  attn->add_option("--in", in, "Dump file")->required();
  attn->add_option("--stream", self_stream, "text, visual, fusion-text or fusion-visual")->required();
  attn->add_option("--out", out_path, "Grid file (default: stdout)");

  auto* gates = app.add_subcommand("gate-stats", "Gate mean/min/max and histogram per bridge");
  add_common(gates);
  gates->add_option("--in", in, "Dump file")->required();
  gates->add_option("--out", out_path, "JSONL file (default: stdout)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter block");
  add_common(gc);
  gc->add_option("--coords", coords, "Sampled coordinates per tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n";
    const auto parsed = app.get_subcommands();
    err << (parsed.empty() ? app.help() : parsed.front()->help());
    return kExitUsage;
  }

  auto emit = [&](const std::string& text) {
    if (out_path.empty()) {
      out << text;
      return;
    }
    detail::claim_output(out_path, common.force);
    detail::write_text(out_path, text);
  };

  try {
    if (*gen) {
      const auto cfg = detail::resolve_config(common);
      if (std::filesystem::exists(std::filesystem::path(out_path) / "manifest.jsonl") && !common.force)
        throw std::runtime_error("corpus '" + out_path + "' already exists (use --force to overwrite)");
      const auto seed = held_out ? held_out_seed(cfg.seed) : cfg.seed;
      const auto corpus = generate_corpus(n ? n : cfg.train.corpus_size, cfg.model, seed);
      save_corpus(corpus, out_path);
      out << "wrote " << corpus.size() << " records to " << out_path << "\n";
    } else if (*pre) {
      TrainState state = resume.empty() ? TrainState::fresh(detail::resolve_config(common))
                                        : TrainState::from(load_checkpoint(resume));
      const auto corpus = detail::corpus_or_generated(in, state.config, state.config.seed);
      train_loop(state, corpus, {out_path, common.force});
      out << "trained to step " << state.step << "; logs and checkpoints in " << out_path << "\n";
    } else if (*ev) {
      const auto ck = load_checkpoint(in);
      const auto seed = common.seed.value_or(ck.config.seed);
      const auto corpus = data.empty() ? generate_corpus(ck.config.train.corpus_size, ck.config.model, held_out_seed(ck.config.seed))
                                       : load_corpus(data);
      const auto r = eval_itm(ck.params, ck.config.model, corpus, seed, items ? items : ck.config.train.eval_items, queries);
      nlohmann::ordered_json j;
      j["step"] = ck.step;
      j["items"] = r.items;
      j["positives"] = r.positives;
      j["itm_accuracy"] = r.accuracy;
      j["queries"] = r.queries;
      j["recall_at_1"] = r.recall_at_1;
      emit(j.dump() + "\n");
    } else if (*dump) {
      detail::claim_output(out_path, common.force);
      const auto ck = load_checkpoint(in);
      const auto corpus = data.empty() ? generate_corpus(ck.config.train.corpus_size, ck.config.model, held_out_seed(ck.config.seed))
                                       : load_corpus(data);
      const auto d = make_dump(ck.params, ck.config.model, corpus, n ? n : 64,
                               std::filesystem::path(in).filename().string() + "@step" + std::to_string(ck.step));
      d.save(out_path);
      out << "dumped " << d.examples.size() << " examples to " << out_path << "\n";
    } else if (*cka) {
      if (self_stream.empty() && pair.empty()) throw CLI::RequiredError("--self or --pair");
      const auto d = ActivationDump::load(in);
      const auto a = parse_stream(self_stream.empty() ? pair[0] : self_stream);
      const auto b = parse_stream(self_stream.empty() ? pair[1] : self_stream);
      std::ostringstream s;
      write_grid(s, cka_layer_matrix(d, a, b, parse_pooling(pooling)));
      emit(s.str());
    } else if (*attn) {
      std::ostringstream s;
      write_grid(s, attention_distance_matrix(ActivationDump::load(in), parse_stream(self_stream)));
      emit(s.str());
    } else if (*gates) {
      std::ostringstream s;
      for (const auto& [k, g] : gate_statistics(ActivationDump::load(in))) s << gate_stats_record(k, g).dump() << "\n";
      emit(s.str());
    } else if (*gc) {
      const auto cfg = detail::resolve_config(common);
      const auto report = gradcheck_model(cfg.model, cfg.seed, coords);
      for (const auto& b : report.blocks)
        out << std::left << std::setw(40) << b.name << ' ' << std::setw(4) << b.coords << ' ' << std::scientific
            << std::setprecision(3) << b.max_rel_error << std::defaultfloat << "\n";
      const bool ok = report.passed(1e-4);
      out << "max relative error " << report.worst() << (ok ? " < " : " >= ") << "1e-4\n";
      return ok ? kExitOk : kExitFailure;
    }
  } catch (const CLI::Error& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace crossgate

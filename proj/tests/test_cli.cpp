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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "crossgate/cli.hpp"

using namespace crossgate;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "crossgate");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}


class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root() { return fs::path(::testing::TempDir()) / "crossgate_cli"; }
  static std::string path(const std::string& leaf) { return (root() / leaf).string(); }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    ASSERT_EQ(cli({"gen-data", "--out", path("corpus"), "--n", "72", "--seed", "3"}).code, 0);
    const auto r = cli({"pretrain", "--in", path("corpus"), "--out", path("run"), "--seed", "3", "--set",
                        "total_steps=2", "--set", "batch_size=4"});
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_EQ(cli({"dump-activations", "--in", path("run/final.ckpt"), "--data", path("corpus"), "--n", "64", "--out",
                   path("act.dump")})
                  .code,
              0);
  }
};

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"gen-data", "pretrain", "eval-itm", "dump-activations", "cka", "attn-distance", "gate-stats", "gradcheck"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, UnknownSubcommandListsValidSet) {
  const auto r = cli({"train-everything"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gate-stats"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto r = cli({"gen-data", "--out", "x", "--colour", "red"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--n"), std::string::npos);
  EXPECT_EQ(cli({"cka", "--in", "x"}).code, 1);
}

TEST(Cli, BadConfigIsRuntimeFailure) {
  const auto cfg = fs::path(::testing::TempDir()) / "crossgate_bad.cfg";
  detail::write_text(cfg, "fusion_dim=32\nbanana=1\n");
  const auto r = cli({"gen-data", "--out", (fs::path(::testing::TempDir()) / "crossgate_never").string(), "--config", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("banana"), std::string::npos);
}

TEST(Cli, EnvironmentSuppliesConfigPath) {
  const auto cfg = fs::path(::testing::TempDir()) / "crossgate_env.cfg";
  detail::write_text(cfg, "corpus_size=5\n");
  const auto dir = fs::path(::testing::TempDir()) / "crossgate_env_corpus";
  fs::remove_all(dir);
  ::setenv("CROSSGATE_CONFIG", cfg.c_str(), 1);
  const auto r = cli({"gen-data", "--out", dir.string()});
  ::unsetenv("CROSSGATE_CONFIG");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_corpus(dir).size(), 5u);
}

TEST_F(CliPipeline, GenDataIsWriteOnce) {
  EXPECT_EQ(cli({"gen-data", "--out", path("corpus"), "--n", "72", "--seed", "3"}).code, 2);
  EXPECT_EQ(cli({"gen-data", "--out", path("corpus"), "--n", "72", "--seed", "3", "--force"}).code, 0);
  EXPECT_EQ(load_corpus(path("corpus")).size(), 72u);
}

TEST_F(CliPipeline, PretrainWritesLogsAndRefusesRerun) {
  EXPECT_TRUE(fs::exists(path("run/metrics.jsonl")));
  EXPECT_TRUE(fs::exists(path("run/gates.jsonl")));
  EXPECT_EQ(load_checkpoint(path("run/final.ckpt")).step, 2u);
  const auto r = cli({"pretrain", "--in", path("corpus"), "--out", path("run"), "--set", "total_steps=1"});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliPipeline, PairedTopologyRun) {
  const auto r = cli({"pretrain", "--in", path("corpus"), "--out", path("run_last"), "--seed", "3", "--set", "total_steps=2",
                      "--set", "batch_size=4", "--set", "topology=last-only"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(path("run_last/final.ckpt")).config.model.topology, Topology::last_only);
  std::ifstream a(path("run/metrics.jsonl")), b(path("run_last/metrics.jsonl"));
  std::string la, lb;
  std::getline(a, la);
  std::getline(b, lb);
  const auto ja = nlohmann::json::parse(la), jb = nlohmann::json::parse(lb);
  EXPECT_EQ(ja["lr"], jb["lr"]);
  EXPECT_TRUE(ja.contains("gate_mean"));
  EXPECT_FALSE(jb.contains("gate_mean"));
}

TEST_F(CliPipeline, EvalItmReportsJson) {
  const auto r = cli({"eval-itm", "--in", path("run/final.ckpt"), "--data", path("corpus"), "--items", "20", "--queries", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["items"], 20);
  EXPECT_EQ(j["positives"], 10);
  EXPECT_GE(j["itm_accuracy"].get<double>(), 0.0);
  EXPECT_TRUE(j.contains("recall_at_1"));
}

TEST_F(CliPipeline, CkaSelfHasUnitDiagonal) {
  const auto r = cli({"cka", "--in", path("act.dump"), "--self", "text"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream s(r.out);
  std::vector<std::vector<double>> m;
  for (std::string line; std::getline(s, line);) {
    std::istringstream ls(line);
    m.emplace_back();
    for (double v; ls >> v;) m.back().push_back(v);
  }
  ASSERT_EQ(m.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_EQ(m[i].size(), 4u);
    EXPECT_NEAR(m[i][i], 1.0, 1e-6);
  }
  EXPECT_EQ(cli({"cka", "--in", path("act.dump"), "--pair", "text", "fusion-text", "--pooling", "mean"}).code, 0);
  EXPECT_EQ(cli({"cka", "--in", path("act.dump"), "--self", "audio"}).code, 2);
}

TEST_F(CliPipeline, AttentionDistanceAndGateStats) {
  const auto a = cli({"attn-distance", "--in", path("act.dump"), "--stream", "visual", "--out", path("attn.txt")});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_TRUE(fs::exists(path("attn.txt")));
  EXPECT_EQ(cli({"attn-distance", "--in", path("act.dump"), "--stream", "visual", "--out", path("attn.txt")}).code, 2);
  const auto g = cli({"gate-stats", "--in", path("act.dump")});
  ASSERT_EQ(g.code, 0) << g.err;
  std::istringstream s(g.out);
  std::size_t lines = 0;
  for (std::string line; std::getline(s, line); ++lines) EXPECT_TRUE(nlohmann::json::parse(line).contains("histogram"));
  EXPECT_EQ(lines, 16u);
}

TEST(Cli, GradcheckSmallSample) {
  const auto r = cli({"gradcheck", "--coords", "1"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("fusion.layer1.gate_text.w"), std::string::npos);
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
}

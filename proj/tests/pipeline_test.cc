// Copyright 2026 The DP-Align Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dpalign/pipeline.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "dpalign/accountant.h"
#include "dpalign/config.h"
#include "tests/oracles.h"

namespace dpalign {
namespace {

namespace fs = std::filesystem;
using ::testing::HasSubstr;

std::string ReadFile(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path TempDir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("dpalign_pipeline_test_" + name);
  fs::remove_all(dir);
  return dir;
}

TEST(RunConfigTest, UnknownKeyNamesTheLine) {
  auto c = ParseRunConfig("seed = 3\n# comment\n\nppo.batchsize = 4\n");
  EXPECT_EQ(c.status().code(), absl::StatusCode::kInvalidArgument);
  EXPECT_THAT(c.status().message(), HasSubstr("line 4"));
  EXPECT_THAT(c.status().message(), HasSubstr("ppo.batchsize"));
  EXPECT_FALSE(ParseRunConfig("seed 3\n").ok());
  EXPECT_FALSE(ParseRunConfig("seed = 3\nseed = 4\n").ok());
  EXPECT_FALSE(ParseRunConfig("seed = x\n").ok());
  EXPECT_THAT(ParseRunConfig("", {"nope=1"}).status().message(), HasSubstr("override"));
}

TEST(RunConfigTest, StagePrivacyOverridesGlobal) {
  auto c = ParseRunConfig("sft.privacy.epsilon = 4\nprivacy.mode = dp\nprivacy.epsilon = 8\n");
  ASSERT_TRUE(c.ok()) << c.status();
  EXPECT_EQ(c->sft.privacy.mode, PrivacyMode::kDp);
  EXPECT_EQ(c->ppo.privacy.mode, PrivacyMode::kDp);
  EXPECT_EQ(c->sft.privacy.target_epsilon, 4.0);
  EXPECT_EQ(c->ppo.privacy.target_epsilon, 8.0);
  EXPECT_EQ(c->reward.privacy.target_epsilon, 8.0);
  EXPECT_TRUE(c->Validate().ok());
  // Overrides are applied after the file.
  c = ParseRunConfig("seed = 1\n", {"seed=9"});
  ASSERT_TRUE(c.ok()) << c.status();
  EXPECT_EQ(c->seed, 9u);
  EXPECT_EQ(c->ppo.seed, 9u);
}

// Parsing validates, so a bad combination fails at parse time.
TEST(RunConfigTest, MixedModesNeedExplicitOptIn) {
  const std::string text = "ppo.privacy.mode = dp\nppo.privacy.epsilon = 8\n";
  auto c = ParseRunConfig(text);
  EXPECT_THAT(c.status().message(), HasSubstr("allow-mixed"));
  c = ParseRunConfig(text + "allow_mixed = true\n");
  EXPECT_TRUE(c.ok()) << c.status();
  // Disabled stages do not count as mixed.
  c = ParseRunConfig(text + "sft.enabled = false\n");
  EXPECT_TRUE(c.ok()) << c.status();
}

TEST(RunConfigTest, DpNeedsExactlyOneOfTargetAndNoise) {
  EXPECT_FALSE(ParseRunConfig("privacy.mode = dp\n").ok());
  EXPECT_FALSE(
      ParseRunConfig("privacy.mode = dp\nprivacy.epsilon = 2\nprivacy.noise_multiplier = 1\n")
          .ok());
  EXPECT_TRUE(ParseRunConfig("privacy.mode = dp\nprivacy.noise_multiplier = 1\n").ok());
  auto c = ParseRunConfig("privacy.mode = dp\nprivacy.epsilon = 2\nppo.ppo_epochs = 2\n");
  EXPECT_EQ(c.status().code(), absl::StatusCode::kFailedPrecondition);
}

TEST(RunConfigTest, KindSetsPartitionDefault) {
  auto lex = ParseRunConfig("");
  auto pref = ParseRunConfig("pipeline.kind = preference\n");
  auto custom = ParseRunConfig("partition.fractions = 0.2,0.3,0.5\npipeline.kind = preference\n");
  ASSERT_TRUE(lex.ok() && pref.ok() && custom.ok());
  EXPECT_EQ(lex->fractions, (std::array<double, 3>{0.5, 0.0, 0.5}));
  EXPECT_EQ(pref->fractions, (std::array<double, 3>{0.25, 0.35, 0.40}));
  EXPECT_EQ(custom->fractions, (std::array<double, 3>{0.2, 0.3, 0.5}));
  EXPECT_EQ(lex->StagesRun(), (std::array<bool, 3>{true, false, true}));
  EXPECT_EQ(pref->StagesRun(), (std::array<bool, 3>{true, true, true}));
}

TEST(RunConfigTest, EveryKeyIsAccepted) {
  const std::vector<std::string> keys = RunConfigKeys();
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  EXPECT_GT(keys.size(), 60u);
  // Each key round-trips through the echo with its own current value.
  auto base = ParseRunConfig("").value();
  nlohmann::json echo = base.ToJson();
  EXPECT_FALSE(echo.contains("output_dir"));
}

std::vector<CorpusRecord> Corpus(int64_t n, uint64_t seed = 1) {
  CorpusConfig cc;
  cc.size = n;
  Rng rng(seed);
  return GenerateCorpus(cc, DefaultOracle(), rng).value();
}

TEST(PartitionTest, SizesAndDisjointness) {
  const auto corpus = Corpus(301);
  for (std::array<double, 3> f : {std::array<double, 3>{0.5, 0.0, 0.5},
                                  std::array<double, 3>{0.25, 0.35, 0.40},
                                  std::array<double, 3>{0.1, 0.1, 0.1}}) {
    auto p = PartitionCorpus(corpus, f, 4);
    ASSERT_TRUE(p.ok()) << p.status();
    EXPECT_TRUE(p->manifest.disjoint);
    double cumulative = 0;
    int64_t total = 0;
    for (int k = 0; k < kNumPartitions; ++k) {
      cumulative += f[k];
      total += p->manifest.sizes()[k];
      EXPECT_EQ(p->parts[k].size(), p->manifest.ids[k].size());
    }
    EXPECT_EQ(total, std::llround(cumulative * 301));
    std::set<std::string> seen;
    for (const auto& ids : p->manifest.ids) {
      for (const std::string& id : ids) EXPECT_TRUE(seen.insert(id).second) << id;
    }
  }
  auto half = PartitionCorpus(corpus, {0.5, 0.0, 0.5}, 4).value();
  EXPECT_TRUE(half.parts[1].empty());
}

TEST(PartitionTest, SameSeedSameManifest) {
  const auto corpus = Corpus(100);
  auto a = PartitionCorpus(corpus, {0.3, 0.3, 0.4}, 5).value();
  auto b = PartitionCorpus(corpus, {0.3, 0.3, 0.4}, 5).value();
  auto c = PartitionCorpus(corpus, {0.3, 0.3, 0.4}, 6).value();
  EXPECT_EQ(a.manifest.ToJson().dump(), b.manifest.ToJson().dump());
  EXPECT_NE(a.manifest.ids, c.manifest.ids);
  auto back = PartitionManifest::FromJson(a.manifest.ToJson());
  ASSERT_TRUE(back.ok());
  EXPECT_EQ(back->ToJson().dump(), a.manifest.ToJson().dump());
}

TEST(PartitionTest, BadFractions) {
  const auto corpus = Corpus(50);
  EXPECT_EQ(PartitionCorpus(corpus, {0.6, 0.3, 0.2}, 1).status().code(),
            absl::StatusCode::kInvalidArgument);
  EXPECT_FALSE(PartitionCorpus(corpus, {-0.1, 0.3, 0.2}, 1).ok());
}

TEST(VerifyManifestTest, RejectsTampering) {
  const auto corpus = Corpus(60);
  const PartitionManifest good = PartitionCorpus(corpus, {0.4, 0.2, 0.4}, 2).value().manifest;
  auto cert = VerifyManifest(good, corpus);
  ASSERT_TRUE(cert.ok());
  EXPECT_EQ(cert->num_partitions(), 3);

  PartitionManifest overlap = good;
  overlap.ids[2].push_back(overlap.ids[0].front());
  EXPECT_EQ(VerifyManifest(overlap, corpus).status().code(),
            absl::StatusCode::kFailedPrecondition);

  PartitionManifest unflagged = good;
  unflagged.disjoint = false;
  EXPECT_EQ(VerifyManifest(unflagged, corpus).status().code(),
            absl::StatusCode::kFailedPrecondition);

  PartitionManifest foreign = good;
  foreign.ids[1].push_back("not-a-record");
  EXPECT_EQ(VerifyManifest(foreign, corpus).status().code(),
            absl::StatusCode::kFailedPrecondition);

  PartitionManifest repeated = good;
  repeated.ids[1].push_back(repeated.ids[1].front());
  EXPECT_FALSE(VerifyManifest(repeated, corpus).ok());

  EXPECT_FALSE(VerifyManifest(good, Corpus(60, 2)).ok());
}

TEST(MeanCiTest, Examples) {
  auto same = SummarizeMeanCi(std::vector<double>{0.5, 0.5, 0.5});
  ASSERT_TRUE(same.ok());
  EXPECT_EQ(same->mean, 0.5);
  EXPECT_EQ(same->half_width, 0.0);
  auto two = SummarizeMeanCi(std::vector<double>{0.0, 2.0});
  ASSERT_TRUE(two.ok());
  EXPECT_DOUBLE_EQ(two->mean, 1.0);
  // Sample sd sqrt(2).
  EXPECT_NEAR(two->half_width, 1.96 * std::sqrt(2.0) / std::sqrt(2.0), 1e-12);
  EXPECT_EQ(two->ToString(), "1.000 ± 1.960");
  EXPECT_FALSE(SummarizeMeanCi(std::vector<double>{}).ok());
}

std::vector<std::string> Words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

TEST(RougeTest, WorkedExamples) {
  auto r = RougeText("a b c d", "a c d");
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r->rouge1, 6.0 / 7.0, 1e-12);
  EXPECT_NEAR(r->rouge_l, 6.0 / 7.0, 1e-12);
  // Bigrams: {ab, bc, cd} vs {ac, cd}: one match, P 1/3, R 1/2.
  EXPECT_NEAR(r->rouge2, 2 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5), 1e-12);

  auto same = RougeText("the plot was great", "the plot was great").value();
  EXPECT_EQ(same.rouge1, 1.0);
  EXPECT_EQ(same.rouge2, 1.0);
  EXPECT_EQ(same.rouge_l, 1.0);
  auto disjoint = RougeText("x y", "a b").value();
  EXPECT_EQ(disjoint.rouge1, 0.0);
  EXPECT_EQ(disjoint.rouge_l, 0.0);
  // Clipped counts: a repeated word matches at most as often as in the reference.
  EXPECT_NEAR(RougeText("a a a", "a b").value().rouge1, 2 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5),
              1e-12);
}

TEST(RougeTest, ShortSequences) {
  EXPECT_EQ(RougeText("a", "a").value().rouge2, 1.0);
  EXPECT_EQ(RougeText("a", "b").value().rouge2, 0.0);
  EXPECT_EQ(RougeText("a b", "a").value().rouge2, 0.0);
  EXPECT_EQ(RougeText("", "a").value().rouge1, 0.0);
  EXPECT_EQ(RougeText("a", "").status().code(), absl::StatusCode::kInvalidArgument);
}

TEST(RougeTest, LcsAgreesWithIndependentLcs) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> cand, ref;
    std::vector<int> ci, ri;
    const int nc = static_cast<int>(rng.UniformInt(9));
    const int nr = 1 + static_cast<int>(rng.UniformInt(9));
    for (int i = 0; i < nc; ++i) ci.push_back(static_cast<int>(rng.UniformInt(4)));
    for (int i = 0; i < nr; ++i) ri.push_back(static_cast<int>(rng.UniformInt(4)));
    for (int x : ci) cand.push_back(std::string(1, static_cast<char>('a' + x)));
    for (int x : ri) ref.push_back(std::string(1, static_cast<char>('a' + x)));
    auto r = Rouge(cand, ref);
    ASSERT_TRUE(r.ok());
    const double lcs = static_cast<double>(testing::LcsLength(ci, ri));
    const double want = lcs == 0 ? 0.0 : 2 * lcs / (nc + nr);
    EXPECT_NEAR(r->rouge_l, want, 1e-12);
    EXPECT_GE(r->rouge1, r->rouge_l - 1e-12);
  }
}

RunConfig TinyRun(const fs::path& dir, const std::string& extra = "") {
  const std::string text =
      "seed = 3\n"
      "corpus.size = 120\n"
      "test.size = 12\n"
      "model.context_len = 96\n"
      "model.d_model = 8\n"
      "model.n_layers = 1\n"
      "model.n_heads = 2\n"
      "sft.epochs = 1\n"
      "sft.batch_size = 8\n"
      "ppo.epochs = 1\n"
      "ppo.batch_size = 16\n"
      "ppo.minibatch_size = 8\n"
      "ppo.max_new = 6\n"
      "eval.max_new = 6\n"
      "prefs.max_new = 6\n"
      "reward.epochs = 1\n"
      "reward.batch_size = 8\n" +
      extra;
  RunConfig c = ParseRunConfig(text).value();
  c.output_dir = dir.string();
  return c;
}

TEST(RunPipelineTest, LexiconRunIsDeterministicAndSkipsRewardStage) {
  const fs::path a = TempDir("a"), b = TempDir("b");
  const std::string dp = "privacy.mode = dp\nprivacy.epsilon = 6\n";
  auto ra = RunPipeline(TinyRun(a, dp));
  auto rb = RunPipeline(TinyRun(b, dp));
  ASSERT_TRUE(ra.ok()) << ra.status();
  ASSERT_TRUE(rb.ok());
  for (const char* f : {"report.json", "final.ckpt", "sft.ckpt", "metrics.jsonl",
                        "manifest.json"}) {
    EXPECT_EQ(ReadFile(a / f), ReadFile(b / f)) << f;
  }
  EXPECT_FALSE(fs::exists(a / "reward.ckpt"));
  EXPECT_FALSE(fs::exists(a / "prefs.tsv"));

  const nlohmann::json& report = ra->report;
  EXPECT_EQ(report["status"], "ok");
  ASSERT_EQ(report["stages"].size(), 2u);
  double max_eps = 0, max_delta = 0;
  for (const auto& s : report["stages"]) {
    EXPECT_NE(s["stage"], "reward");
    max_eps = std::max(max_eps, s["epsilon"].get<double>());
    max_delta = std::max(max_delta, s["delta"].get<double>());
    EXPECT_LE(s["epsilon"].get<double>(), 6.0);
  }
  ASSERT_TRUE(ra->budget.has_value());
  EXPECT_EQ(ra->budget->epsilon, max_eps);
  EXPECT_EQ(ra->budget->delta, max_delta);
  EXPECT_EQ(report["privacy"]["epsilon"].get<double>(), max_eps);
  EXPECT_EQ(report["privacy"]["composition"], "parallel");
  EXPECT_TRUE(report["eval"].contains("init"));
  EXPECT_TRUE(report["eval"].contains("final"));
  EXPECT_EQ(report["eval"]["test_size"], 12);

  // Test prompts never come from the training corpus.
  std::set<std::string> corpus_ids;
  const nlohmann::json manifest = nlohmann::json::parse(ReadFile(a / "manifest.json"));
  for (const auto& ids : manifest.at("partitions").items()) {
    for (const auto& id : ids.value()) corpus_ids.insert(id.get<std::string>());
  }
  std::istringstream test(ReadFile(a / "test.tsv"));
  for (std::string line; std::getline(test, line);) {
    EXPECT_EQ(corpus_ids.count(line.substr(0, line.find('\t'))), 0u) << line;
  }
}

TEST(RunPipelineTest, PreferenceRunTrainsRewardModel) {
  const fs::path dir = TempDir("pref");
  auto r = RunPipeline(TinyRun(dir, "pipeline.kind = preference\nprefs.ties = coin\n"));
  ASSERT_TRUE(r.ok()) << r.status();
  EXPECT_TRUE(fs::exists(dir / "reward.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "prefs.tsv"));
  ASSERT_EQ(r->report["stages"].size(), 3u);
  EXPECT_TRUE(std::isinf(r->budget->epsilon));
  const auto sizes = r->report["manifest"]["sizes"];
  EXPECT_EQ(sizes[1].get<int64_t>(), std::llround(0.35 * 120 + 0.25 * 120) -
                                          std::llround(0.25 * 120));
}

TEST(RunPipelineTest, TamperedManifestFailsBeforeTraining) {
  const fs::path first = TempDir("m1"), second = TempDir("m2");
  ASSERT_TRUE(RunPipeline(TinyRun(first, "ppo.enabled = false\nsft.enabled = false\n")).ok());
  nlohmann::json manifest = nlohmann::json::parse(ReadFile(first / "manifest.json"));
  // A consistent-looking edit: one D1 record is also listed in D3.
  manifest["partitions"]["ppo"].push_back(manifest["partitions"]["sft"][0]);
  manifest["sizes"][2] = manifest["sizes"][2].get<int64_t>() + 1;
  const fs::path tampered = first / "tampered.json";
  std::ofstream(tampered) << manifest.dump();

  auto r = RunPipeline(TinyRun(second, "privacy.mode = dp\nprivacy.epsilon = 6\n"
                                       "partition.manifest = " + tampered.string() + "\n"));
  EXPECT_EQ(r.status().code(), absl::StatusCode::kFailedPrecondition) << r.status();
  const nlohmann::json report = nlohmann::json::parse(ReadFile(second / "report.json"));
  EXPECT_EQ(report["status"], "failed");
  EXPECT_FALSE(report.contains("privacy"));
  EXPECT_FALSE(fs::exists(second / "sft.ckpt"));
  EXPECT_FALSE(fs::exists(second / "final.ckpt"));
}

}  // namespace
}  // namespace dpalign

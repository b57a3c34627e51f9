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

#ifndef DPALIGN_PIPELINE_H_
#define DPALIGN_PIPELINE_H_

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "json.hpp"
#include "dpalign/accountant.h"
#include "dpalign/config.h"
#include "dpalign/ppo.h"
#include "dpalign/rng.h"
#include "dpalign/synthetic.h"
#include "dpalign/tiny_lm.h"

namespace dpalign {

// Partition order throughout: D1 (sft), D2 (reward), D3 (ppo).
inline constexpr int kNumPartitions = 3;
inline constexpr std::array<const char*, kNumPartitions> kPartitionNames = {"sft", "reward",
                                                                            "ppo"};

// Hex FNV-1a of the serialized corpus.
std::string CorpusHash(const std::vector<CorpusRecord>& corpus);

struct PartitionManifest {
  std::string corpus_hash;
  int64_t corpus_size = 0;
  uint64_t seed = 0;
  std::array<double, kNumPartitions> fractions = {0, 0, 0};
  std::array<std::vector<std::string>, kNumPartitions> ids;
  // Set only after the id sets were intersected and found disjoint.
  bool disjoint = false;

  std::array<int64_t, kNumPartitions> sizes() const;
  nlohmann::json ToJson() const;
  static absl::StatusOr<PartitionManifest> FromJson(const nlohmann::json& j);
};

struct Partitioned {
  PartitionManifest manifest;
  std::array<std::vector<CorpusRecord>, kNumPartitions> parts;
};

// Shuffles the corpus with the "partition" substream of `seed` and cuts it at
// round(N * cumulative fraction), so the sizes sum to round(N * sum).
absl::StatusOr<Partitioned> PartitionCorpus(const std::vector<CorpusRecord>& corpus,
                                            const std::array<double, kNumPartitions>& fractions,
                                            uint64_t seed);

// FailedPrecondition unless the manifest is flagged disjoint, describes this
// corpus, lists only corpus ids, and its id sets really are disjoint.
absl::StatusOr<DisjointnessCertificate> VerifyManifest(
    const PartitionManifest& manifest, const std::vector<CorpusRecord>& corpus);

// Records of each partition, in manifest order.
absl::StatusOr<std::array<std::vector<CorpusRecord>, kNumPartitions>> ApplyManifest(
    const PartitionManifest& manifest, const std::vector<CorpusRecord>& corpus);

// Mean with a 95% normal-approximation interval, 1.96 * sd / sqrt(n) using
// the sample standard deviation. Identical values give exactly zero width.
struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
  int64_t n = 0;

  // "mean ± half_width" with three decimals.
  std::string ToString() const;
  nlohmann::json ToJson() const;
};

absl::StatusOr<MeanCi> SummarizeMeanCi(std::span<const double> values);

struct EvalResult {
  MeanCi reward;
  std::vector<double> rewards;
  std::vector<TokenSeq> responses;
};

// One sampled response per prompt, scored by `reward`. Rewards are reduced in
// prompt order.
absl::StatusOr<EvalResult> EvalMeanReward(const TinyLM& policy,
                                          const std::vector<std::string>& prompts,
                                          const RewardFunction& reward,
                                          const GenerationConfig& generation, Rng& rng);

struct RougeScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;

  nlohmann::json ToJson() const;
};

// F1 of clipped unigram and bigram overlap, and LCS F1. A side without
// bigrams scores rouge2 = 0, except that two identical sequences score 1.
// An empty reference is an error.
absl::StatusOr<RougeScores> Rouge(std::span<const std::string> candidate,
                                  std::span<const std::string> reference);
// Whitespace-separated words.
absl::StatusOr<RougeScores> RougeText(std::string_view candidate, std::string_view reference);

struct PipelineResult {
  nlohmann::json report;
  // Final composed budget; absent if no certificate was obtained.
  std::optional<PrivacyBudget> budget;
};

// Runs the configured stages, writing into config.output_dir:
//   corpus.tsv test.tsv manifest.json d1.tsv d2_prompts.txt d3_prompts.txt
//   prefs.tsv sft.ckpt reward.ckpt final.ckpt metrics.jsonl report.json
// (only the files of stages that ran). On failure report.json carries
// "status": "failed", the error and whatever completed before it.
absl::StatusOr<PipelineResult> RunPipeline(const RunConfig& config);

}  // namespace dpalign

#endif  // DPALIGN_PIPELINE_H_

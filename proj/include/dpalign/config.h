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

#ifndef DPALIGN_CONFIG_H_
#define DPALIGN_CONFIG_H_

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "absl/status/statusor.h"
#include "json.hpp"
#include "dpalign/ppo.h"
#include "dpalign/stages.h"
#include "dpalign/synthetic.h"
#include "dpalign/tiny_lm.h"

namespace dpalign {

// lexicon: SFT then PPO against the public lexicon reward, no reward stage.
// preference: SFT, synthetic preferences, reward model, then PPO against it.
enum class PipelineKind { kLexicon, kPreference };

absl::StatusOr<PipelineKind> ParsePipelineKind(const std::string& s);
const char* PipelineKindName(PipelineKind kind);

struct RunConfig {
  uint64_t seed = 0;
  PipelineKind kind = PipelineKind::kLexicon;
  std::string output_dir = "run";
  int threads = 1;

  // Empty path: the corpus is generated from `corpus`.
  std::string corpus_path;
  CorpusConfig corpus;
  int64_t test_size = 200;

  // Order sft, reward, ppo. Kind-dependent default unless set.
  std::array<double, 3> fractions = {0.5, 0.0, 0.5};
  bool fractions_set = false;
  // Reuse an existing manifest instead of partitioning.
  std::string manifest_path;

  // Empty path: a fresh model from `model`.
  std::string model_init;
  TinyLMConfig model;

  bool sft_enabled = true;
  StageConfig sft;
  StageConfig reward;
  PreferenceSynthConfig prefs;
  double oracle_noise_rate = 0.0;
  bool ppo_enabled = true;
  PPOConfig ppo;

  GenerationConfig eval_generation;
  // Non-private reward model used for scoring only.
  std::string eval_reward_model;

  bool allow_mixed = false;

  RunConfig();

  // Whether each of sft, reward, ppo runs under this config.
  std::array<bool, 3> StagesRun() const;
  absl::Status Validate() const;
  // Normalized echo of every setting except output_dir.
  nlohmann::json ToJson() const;
};

// Flat `key=value` lines, `#` comments. Stage keys are prefixed with the
// stage name; `privacy.*` keys set the default for every stage and
// `<stage>.privacy.*` overrides it. `overrides` are extra lines applied last.
absl::StatusOr<RunConfig> ParseRunConfig(std::string_view text,
                                         const std::vector<std::string>& overrides = {});
absl::StatusOr<RunConfig> LoadRunConfig(const std::string& path,
                                        const std::vector<std::string>& overrides = {});

// Every accepted key, sorted.
std::vector<std::string> RunConfigKeys();

}  // namespace dpalign

#endif  // DPALIGN_CONFIG_H_

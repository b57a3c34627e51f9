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

#ifndef DPALIGN_STAGES_H_
#define DPALIGN_STAGES_H_

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "absl/status/statusor.h"
#include "dpalign/accountant.h"
#include "dpalign/datasets.h"
#include "dpalign/dp_optim.h"
#include "dpalign/tiny_lm.h"
#include "json.hpp"

namespace dpalign {

using MetricsSink = std::function<void(const nlohmann::json&)>;

inline constexpr double kInfiniteEpsilon = std::numeric_limits<double>::infinity();

// JSON number, or the string "inf" for an infinite epsilon.
nlohmann::json EpsilonJson(double epsilon);

// What a stage was asked for. In dp mode exactly one of target_epsilon and
// noise_multiplier must be positive (unless diagnostic_zero_noise).
struct PrivacyOptions {
  PrivacyMode mode = PrivacyMode::kNonprivate;
  double target_epsilon = 0.0;
  // 0 selects 1 / dataset size.
  double delta = 0.0;
  double noise_multiplier = 0.0;
  double clip_norm = 1.0;
  bool diagnostic_zero_noise = false;
};

// What a stage runs with, and what the accountant says it costs.
struct ResolvedPrivacy {
  DPConfig dp;
  double delta = 0.0;
  double epsilon = kInfiniteEpsilon;
  // Best RDP order for `epsilon`; 0 when not private.
  double rdp_order = 0.0;
  // True iff the run is dp with sigma > 0.
  bool certified = false;
};

// Fails before any training when a target epsilon is infeasible.
absl::StatusOr<ResolvedPrivacy> ResolvePrivacy(const PrivacyOptions& options,
                                               int64_t dataset_size,
                                               double sampling_prob,
                                               int64_t steps);

// Mean negative log-likelihood of `target` given `prompt`. Prompt positions
// contribute no loss. Empty targets fail the tape.
Var SftLoss(const TinyLMConfig& config, BoundParams& params,
            const TokenSeq& prompt, const TokenSeq& target);
absl::StatusOr<double> SftLossValue(const TinyLM& model, const SftExample& example);

// softplus(-(r(x, chosen) - r(x, rejected))) = -log sigmoid of the margin.
Var PreferenceLoss(const TinyLMConfig& config, BoundParams& params,
                   const PreferenceRecord& record);
// Batch mean of PreferenceLoss. Empty batches are an error.
absl::StatusOr<double> PreferenceLossValue(const TinyLM& model,
                                           std::span<const PreferenceRecord> batch);

// Fraction of records whose chosen completion scores higher; ties count 1/2.
absl::StatusOr<double> PairwiseAccuracy(const TinyLM& model,
                                        std::span<const PreferenceRecord> records);

// Deterministic, seed-dependent split used by the reward stage.
bool IsHeldOut(const PreferenceRecord& record, uint64_t seed, double fraction);

struct TrainLoopConfig {
  int64_t steps = 1;
  // Expected batch size in dp mode, exact batch size otherwise.
  int64_t batch_size = 16;
  // Nonprivate runs may opt into Poisson batches; dp runs always use them.
  bool poisson_nonprivate = false;
  AdamWConfig optimizer;
  int num_threads = 1;
};

struct TrainLoopResult {
  int64_t steps = 0;
  int64_t skipped_steps = 0;
  double final_loss = 0.0;
  double mean_fraction_clipped = 0.0;
};

// `steps` optimizer steps over examples [0, n). Poisson batches draw from
// `sampling_rng` with q = batch_size / n; shuffled batches walk a fresh
// permutation every epoch. Emits one metrics record per step.
absl::StatusOr<TrainLoopResult> RunTrainingLoop(
    ParameterSet& params, const TrainableSet& trainable, int64_t n,
    const ExampleLoss& loss, const DPConfig& dp, const TrainLoopConfig& config,
    Rng& sampling_rng, Rng& noise_rng, const std::string& stage,
    const MetricsSink& sink);

struct StageConfig {
  TrainMode train_mode = TrainMode::kFull;
  int64_t epochs = 1;
  int64_t batch_size = 16;
  bool poisson_nonprivate = false;
  AdamWConfig optimizer;
  PrivacyOptions privacy;
  uint64_t seed = 0;
  int num_threads = 1;
  // Reward stage only.
  double heldout_fraction = 0.1;
};

struct StageReport {
  std::string stage;
  PrivacyMode mode = PrivacyMode::kNonprivate;
  double epsilon = kInfiniteEpsilon;
  double delta = 0.0;
  double noise_multiplier = 0.0;
  double sampling_prob = 0.0;
  double rdp_order = 0.0;
  bool certified = false;
  int64_t dataset_size = 0;
  int64_t steps = 0;
  int64_t skipped_steps = 0;
  double final_train_loss = 0.0;
  double mean_fraction_clipped = 0.0;
  std::optional<double> heldout_accuracy;
  int64_t heldout_size = 0;
  // PPO only.
  std::optional<double> initial_mean_reward;
  std::optional<double> final_mean_reward;
  // Stage-specific extras, merged into ToJson().
  nlohmann::json details = nlohmann::json::object();

  PrivacyBudget budget() const { return {epsilon, delta}; }
  nlohmann::json ToJson() const;
};

// Metadata keys written on stage outputs.
inline constexpr char kMetaDpCertified[] = "dp_certified";
inline constexpr char kMetaEpsilon[] = "epsilon";
inline constexpr char kMetaDelta[] = "delta";
inline constexpr char kMetaStage[] = "stage";

void StampPrivacyMetadata(const StageReport& report, TinyLM& model);

// Supervised fine-tuning on (prompt, target) examples.
absl::StatusOr<TinyLM> RunSftStage(const TinyLM& init,
                                   const std::vector<SftExample>& data,
                                   const StageConfig& config,
                                   StageReport* report,
                                   const MetricsSink& sink = nullptr);

// Reward-model training on preference records. A held-out fraction is used
// only for the reported accuracy; the remainder defines the dataset size
// for accounting.
absl::StatusOr<TinyLM> RunRewardStage(const TinyLM& init,
                                      const std::vector<PreferenceRecord>& data,
                                      const StageConfig& config,
                                      StageReport* report,
                                      const MetricsSink& sink = nullptr);

}  // namespace dpalign

#endif  // DPALIGN_STAGES_H_

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

#ifndef DPALIGN_PPO_H_
#define DPALIGN_PPO_H_

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "dpalign/dp_optim.h"
#include "dpalign/stages.h"
#include "dpalign/synthetic.h"
#include "dpalign/tiny_lm.h"

namespace dpalign {

struct PPOConfig {
  int64_t batch_size = 64;
  int64_t minibatch_size = 16;
  // Optimisation passes over each rollout batch. Must be 1 under dp.
  int ppo_epochs = 1;
  int64_t epochs = 1;
  double kl_coef = 0.2;
  double clip_range = 0.2;
  double value_coef = 0.1;
  double gamma = 1.0;
  double lambda = 0.95;
  GenerationConfig generation;
  TrainMode train_mode = TrainMode::kFull;
  AdamWConfig optimizer;
  PrivacyOptions privacy;
  // Nonprivate runs may use Poisson batches too; dp runs always do.
  bool poisson_nonprivate = false;
  uint64_t seed = 0;
  int num_threads = 1;

  absl::Status Validate() const;
};

// Scores a response. Implementations must be deterministic.
class RewardFunction {
 public:
  virtual ~RewardFunction() = default;
  virtual absl::StatusOr<double> Score(const TokenSeq& prompt,
                                       const TokenSeq& response) const = 0;
  virtual std::string name() const = 0;
  // Independent of every private partition.
  virtual bool is_public() const = 0;
  // Trained on private data under a dp guarantee.
  virtual bool dp_certified() const = 0;
};

class LexiconRewardFunction : public RewardFunction {
 public:
  explicit LexiconRewardFunction(SyntheticOracle oracle) : oracle_(std::move(oracle)) {}
  absl::StatusOr<double> Score(const TokenSeq& prompt, const TokenSeq& response) const override;
  std::string name() const override { return "lexicon"; }
  bool is_public() const override { return true; }
  bool dp_certified() const override { return false; }

 private:
  SyntheticOracle oracle_;
};

// Reward read from a trained model's reward head. Certified iff the
// checkpoint metadata says so.
class ModelRewardFunction : public RewardFunction {
 public:
  explicit ModelRewardFunction(TinyLM model, bool is_public = false)
      : model_(std::move(model)), public_(is_public) {}
  absl::StatusOr<double> Score(const TokenSeq& prompt, const TokenSeq& response) const override;
  std::string name() const override { return "reward_model"; }
  bool is_public() const override { return public_; }
  bool dp_certified() const override;
  const TinyLM& model() const { return model_; }

 private:
  TinyLM model_;
  bool public_;
};

// In dp mode the reward must be public or dp-certified.
absl::Status CheckRewardAdmissible(const RewardFunction& reward, PrivacyMode mode);

// s[t] = -kl_coef * (p[t] - p_ref[t]), plus `reward` at the last token.
absl::StatusOr<std::vector<double>> ComputeScores(double reward,
                                                  std::span<const double> logprobs,
                                                  std::span<const double> ref_logprobs,
                                                  double kl_coef);

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Generalized advantage estimation with v = 0 past the last token;
// returns = A + v.
absl::StatusOr<Advantages> ComputeAdvantages(std::span<const double> values,
                                             std::span<const double> scores,
                                             double gamma, double lambda);

struct PpoLossValues {
  double policy = 0.0;
  double value = 0.0;
};

// Per-token means over one sequence:
//   ratio  = exp(clamp(p - p_old, -20, 20))
//   policy = max(-ratio A, -clip(ratio, 1 - e, 1 + e) A)
//   value  = value_coef (A + v_old - v)^2
// with A computed from (v_old, s_old).
absl::StatusOr<PpoLossValues> PpoLoss(std::span<const double> old_logprobs,
                                      std::span<const double> old_values,
                                      std::span<const double> old_scores,
                                      std::span<const double> logprobs,
                                      std::span<const double> values,
                                      const PPOConfig& config);

struct PpoLossVars {
  Var policy;
  Var value;
};

// Tape form of PpoLoss with precomputed advantages.
PpoLossVars PpoLossOnTape(Var logprobs, Var values,
                          std::span<const double> old_logprobs,
                          std::span<const double> old_values,
                          std::span<const double> advantages,
                          const PPOConfig& config);

struct RolloutBatch {
  std::vector<int64_t> prompt_ids;
  std::vector<TokenSeq> prompts;
  std::vector<TokenSeq> responses;
  // Log-probs recorded while generating.
  std::vector<std::vector<double>> generation_logprobs;
  std::vector<double> rewards;
  // Filled by PrepareBatch.
  std::vector<std::vector<double>> logprobs;
  std::vector<Tensor> logits;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> ref_logprobs;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<double>> advantages;
  std::vector<std::vector<double>> returns;

  size_t size() const { return prompts.size(); }
};

// Samples one response per prompt and scores it. Any reward failure aborts
// the whole batch.
absl::StatusOr<RolloutBatch> Rollout(const TinyLM& policy, const RewardFunction& reward,
                                     const std::vector<std::string>& prompts,
                                     std::span<const int64_t> prompt_ids,
                                     const GenerationConfig& generation, Rng& rng);

// Forward passes of policy and reference on the batch, then scores and
// advantages.
absl::Status PrepareBatch(const TinyLM& policy, const TinyLM& reference,
                          const PPOConfig& config, RolloutBatch& batch);

struct UpdateStats {
  int64_t optimizer_steps = 0;
  double loss_policy = 0.0;
  double loss_value = 0.0;
  double fraction_clipped = 0.0;
};

// Stage II. Nonprivate: ppo_epochs passes, each over B/m minibatches. dp:
// one pass, the batch split into B/m chunks, each a clipped noisy step.
absl::StatusOr<UpdateStats> PpoUpdate(TinyLM& policy, AdamW& optimizer,
                                      const RolloutBatch& batch, const DPConfig& dp,
                                      const PPOConfig& config, Rng& shuffle_rng,
                                      Rng& noise_rng);

// Full alignment stage over the prompts of D3. Emits one metrics record per
// rollout batch: {epoch, batch, mean_reward, mean_kl, loss_p, loss_v,
// eps_spent}.
absl::StatusOr<TinyLM> RunPpoStage(const TinyLM& init,
                                   const std::vector<std::string>& prompts,
                                   const RewardFunction& reward,
                                   const PPOConfig& config, StageReport* report,
                                   const MetricsSink& sink = nullptr);

}  // namespace dpalign

#endif  // DPALIGN_PPO_H_

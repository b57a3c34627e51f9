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

#include "dpalign/ppo.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "absl/strings/str_cat.h"
#include "dpalign/checkpoint.h"
#include "dpalign/status_macros.h"

namespace dpalign {

absl::Status PPOConfig::Validate() const {
  if (batch_size < 1 || minibatch_size < 1) {
    return absl::InvalidArgumentError("batch and minibatch sizes must be >= 1");
  }
  if (batch_size % minibatch_size != 0) {
    return absl::InvalidArgumentError(absl::StrCat("minibatch size ", minibatch_size,
                                                   " does not divide batch size ", batch_size));
  }
  if (ppo_epochs < 1) return absl::InvalidArgumentError("ppo_epochs must be >= 1");
  if (epochs < 1) return absl::InvalidArgumentError("epochs must be >= 1");
  if (!(kl_coef >= 0)) return absl::InvalidArgumentError("kl_coef must be >= 0");
  if (!(clip_range > 0 && clip_range < 1)) {
    return absl::InvalidArgumentError("clip_range must be in (0, 1)");
  }
  if (!(value_coef >= 0)) return absl::InvalidArgumentError("value_coef must be >= 0");
  if (!(gamma >= 0 && gamma <= 1) || !(lambda >= 0 && lambda <= 1)) {
    return absl::InvalidArgumentError("gamma and lambda must be in [0, 1]");
  }
  if (generation.max_new < 1) return absl::InvalidArgumentError("max_new must be >= 1");
  if (privacy.mode == PrivacyMode::kDp && ppo_epochs != 1) {
    return absl::FailedPreconditionError(absl::StrCat(
        "ppo_epochs = ", ppo_epochs,
        " in dp mode: reusing a Poisson-sampled batch for more than one pass "
        "invalidates the privacy amplification by subsampling; set ppo_epochs = 1"));
  }
  return absl::OkStatus();
}

absl::StatusOr<double> LexiconRewardFunction::Score(const TokenSeq&,
                                                    const TokenSeq& response) const {
  return LexiconReward(oracle_, response);
}

absl::StatusOr<double> ModelRewardFunction::Score(const TokenSeq& prompt,
                                                  const TokenSeq& response) const {
  return RewardScore(model_, prompt, response);
}

bool ModelRewardFunction::dp_certified() const {
  auto it = model_.metadata().find(kMetaDpCertified);
  return it != model_.metadata().end() && it->second == "true";
}

absl::Status CheckRewardAdmissible(const RewardFunction& reward, PrivacyMode mode) {
  if (mode != PrivacyMode::kDp || reward.is_public() || reward.dp_certified()) {
    return absl::OkStatus();
  }
  return absl::FailedPreconditionError(absl::StrCat(
      "dp alignment with reward '", reward.name(),
      "' that was trained on private data without a dp certificate; the reward model "
      "would leak its training data through the aligned policy"));
}

absl::StatusOr<std::vector<double>> ComputeScores(double reward,
                                                  std::span<const double> logprobs,
                                                  std::span<const double> ref_logprobs,
                                                  double kl_coef) {
  if (logprobs.size() != ref_logprobs.size()) {
    return absl::InvalidArgumentError(absl::StrCat("ComputeScores: ", logprobs.size(),
                                                   " policy log-probs vs ", ref_logprobs.size(),
                                                   " reference log-probs"));
  }
  if (logprobs.empty()) return absl::InvalidArgumentError("ComputeScores: empty response");
  std::vector<double> s(logprobs.size());
  for (size_t t = 0; t < s.size(); ++t) s[t] = -kl_coef * (logprobs[t] - ref_logprobs[t]);
  s.back() += reward;
  return s;
}

absl::StatusOr<Advantages> ComputeAdvantages(std::span<const double> values,
                                             std::span<const double> scores, double gamma,
                                             double lambda) {
  if (values.empty()) return absl::InvalidArgumentError("ComputeAdvantages: empty response");
  if (values.size() != scores.size()) {
    return absl::InvalidArgumentError(absl::StrCat("ComputeAdvantages: ", values.size(),
                                                   " values vs ", scores.size(), " scores"));
  }
  const size_t n = values.size();
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double running = 0.0;
  for (size_t k = n; k-- > 0;) {
    const double next_value = k + 1 < n ? values[k + 1] : 0.0;
    const double delta = scores[k] + gamma * next_value - values[k];
    running = delta + gamma * lambda * running;
    out.advantages[k] = running;
    out.returns[k] = running + values[k];
  }
  return out;
}

absl::StatusOr<PpoLossValues> PpoLoss(std::span<const double> old_logprobs,
                                      std::span<const double> old_values,
                                      std::span<const double> old_scores,
                                      std::span<const double> logprobs,
                                      std::span<const double> values, const PPOConfig& config) {
  const size_t n = old_logprobs.size();
  if (n == 0 || old_values.size() != n || old_scores.size() != n || logprobs.size() != n ||
      values.size() != n) {
    return absl::InvalidArgumentError("PpoLoss: inputs must be non-empty and equally long");
  }
  ASSIGN_OR_RETURN(Advantages adv,
                   ComputeAdvantages(old_values, old_scores, config.gamma, config.lambda));
  PpoLossValues out;
  const double lo = 1.0 - config.clip_range, hi = 1.0 + config.clip_range;
  for (size_t t = 0; t < n; ++t) {
    const double a = adv.advantages[t];
    const double ratio = std::exp(std::clamp(logprobs[t] - old_logprobs[t], -20.0, 20.0));
    out.policy += std::max(-ratio * a, -std::clamp(ratio, lo, hi) * a);
    const double err = a + old_values[t] - values[t];
    out.value += err * err;
  }
  out.policy /= static_cast<double>(n);
  out.value *= config.value_coef / static_cast<double>(n);
  if (!std::isfinite(out.policy) || !std::isfinite(out.value)) {
    return absl::InternalError("PpoLoss: non-finite loss");
  }
  return out;
}

PpoLossVars PpoLossOnTape(Var logprobs, Var values, std::span<const double> old_logprobs,
                          std::span<const double> old_values,
                          std::span<const double> advantages, const PPOConfig& config) {
  Tape& tape = *logprobs.tape;
  const int64_t n = static_cast<int64_t>(old_logprobs.size());
  std::vector<double> target(n);
  for (int64_t t = 0; t < n; ++t) target[t] = advantages[t] + old_values[t];
  Var old = tape.Constant(Tensor({n}, std::vector<double>(old_logprobs.begin(), old_logprobs.end())));
  Var adv = tape.Constant(Tensor({n}, std::vector<double>(advantages.begin(), advantages.end())));
  Var ratio = Exp(Clamp(Sub(logprobs, old), -20.0, 20.0));
  Var unclipped = Scale(Mul(ratio, adv), -1.0);
  Var clipped =
      Scale(Mul(Clamp(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range), adv), -1.0);
  PpoLossVars out;
  out.policy = Mean(Maximum(unclipped, clipped));
  out.value = Scale(Mean(Square(Sub(tape.Constant(Tensor({n}, target)), values))),
                    config.value_coef);
  return out;
}

absl::StatusOr<RolloutBatch> Rollout(const TinyLM& policy, const RewardFunction& reward,
                                     const std::vector<std::string>& prompts,
                                     std::span<const int64_t> prompt_ids,
                                     const GenerationConfig& generation, Rng& rng) {
  RolloutBatch batch;
  for (int64_t id : prompt_ids) {
    if (id < 0 || id >= static_cast<int64_t>(prompts.size())) {
      return absl::OutOfRangeError(absl::StrCat("prompt id ", id, " out of range"));
    }
    TokenSeq prompt = EncodePrompt(prompts[id]);
    ASSIGN_OR_RETURN(Generation g, Generate(policy, prompt, generation, rng));
    auto r = reward.Score(prompt, g.tokens);
    if (!r.ok()) {
      return absl::Status(r.status().code(),
                          absl::StrCat("reward function failed on prompt ", id,
                                       "; batch aborted: ", r.status().message()));
    }
    if (!std::isfinite(*r)) {
      return absl::InternalError(absl::StrCat("non-finite reward on prompt ", id));
    }
    batch.prompt_ids.push_back(id);
    batch.prompts.push_back(std::move(prompt));
    batch.responses.push_back(std::move(g.tokens));
    batch.generation_logprobs.push_back(std::move(g.logprobs));
    batch.rewards.push_back(*r);
  }
  return batch;
}

absl::Status PrepareBatch(const TinyLM& policy, const TinyLM& reference, const PPOConfig& config,
                          RolloutBatch& batch) {
  const size_t n = batch.size();
  batch.logprobs.resize(n);
  batch.logits.resize(n);
  batch.values.resize(n);
  batch.ref_logprobs.resize(n);
  batch.scores.resize(n);
  batch.advantages.resize(n);
  batch.returns.resize(n);
  for (size_t i = 0; i < n; ++i) {
    ASSIGN_OR_RETURN(HeadOutputs pol, ForwardHeads(policy, batch.prompts[i], batch.responses[i]));
    ASSIGN_OR_RETURN(HeadOutputs ref,
                     ForwardHeads(reference, batch.prompts[i], batch.responses[i]));
    ASSIGN_OR_RETURN(batch.scores[i], ComputeScores(batch.rewards[i], pol.logprobs,
                                                    ref.logprobs, config.kl_coef));
    ASSIGN_OR_RETURN(Advantages adv, ComputeAdvantages(pol.values, batch.scores[i],
                                                       config.gamma, config.lambda));
    batch.logprobs[i] = std::move(pol.logprobs);
    batch.logits[i] = std::move(pol.logits);
    batch.values[i] = std::move(pol.values);
    batch.ref_logprobs[i] = std::move(ref.logprobs);
    batch.advantages[i] = std::move(adv.advantages);
    batch.returns[i] = std::move(adv.returns);
  }
  return absl::OkStatus();
}

namespace {

// Splits a shuffled copy of [0, n) into k contiguous, nearly equal chunks.
std::vector<std::vector<int64_t>> Chunks(int64_t n, int64_t k, Rng& rng) {
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.UniformInt(i + 1)]);
  std::vector<std::vector<int64_t>> out(k);
  for (int64_t j = 0; j < k; ++j) {
    out[j].assign(order.begin() + j * n / k, order.begin() + (j + 1) * n / k);
  }
  return out;
}

}  // namespace

absl::StatusOr<UpdateStats> PpoUpdate(TinyLM& policy, AdamW& optimizer, const RolloutBatch& batch,
                                      const DPConfig& dp, const PPOConfig& config,
                                      Rng& shuffle_rng, Rng& noise_rng) {
  RETURN_IF_ERROR(config.Validate());
  if (dp.mode == PrivacyMode::kDp && config.ppo_epochs != 1) {
    return absl::FailedPreconditionError(
        "dp update with ppo_epochs > 1 invalidates the privacy amplification by subsampling");
  }
  const int64_t n = static_cast<int64_t>(batch.size());
  const int64_t k = config.batch_size / config.minibatch_size;
  const TinyLMConfig& mc = policy.config();
  std::vector<double> last_policy(n, 0.0), last_value(n, 0.0);
  ExampleLoss loss = [&](BoundParams& p, int64_t i) {
    HeadVars h = ForwardHeadsOnTape(mc, p, batch.prompts[i], batch.responses[i]);
    PpoLossVars l = PpoLossOnTape(h.logprobs, h.values, batch.logprobs[i], batch.values[i],
                                  batch.advantages[i], config);
    if (l.policy.valid() && l.value.valid()) {
      last_policy[i] = l.policy.value().item();
      last_value[i] = l.value.value().item();
    }
    return Add(l.policy, l.value);
  };
  UpdateStats stats;
  double clipped = 0.0;
  int64_t clipped_steps = 0;
  const int passes = dp.mode == PrivacyMode::kDp ? 1 : config.ppo_epochs;
  for (int pass = 0; pass < passes; ++pass) {
    for (const std::vector<int64_t>& chunk : Chunks(n, k, shuffle_rng)) {
      ASSIGN_OR_RETURN(StepTelemetry t, TrainStep(dp, optimizer, policy.mutable_params(), chunk,
                                                  loss, noise_rng, config.num_threads));
      ++stats.optimizer_steps;
      if (!t.skipped && dp.mode == PrivacyMode::kDp) {
        clipped += t.fraction_clipped;
        ++clipped_steps;
      }
    }
  }
  if (n > 0) {
    for (int64_t i = 0; i < n; ++i) {
      stats.loss_policy += last_policy[i];
      stats.loss_value += last_value[i];
    }
    stats.loss_policy /= n;
    stats.loss_value /= n;
  }
  if (clipped_steps > 0) stats.fraction_clipped = clipped / clipped_steps;
  return stats;
}

absl::StatusOr<TinyLM> RunPpoStage(const TinyLM& init, const std::vector<std::string>& prompts,
                                   const RewardFunction& reward, const PPOConfig& config,
                                   StageReport* report, const MetricsSink& sink) {
  RETURN_IF_ERROR(config.Validate());
  RETURN_IF_ERROR(CheckRewardAdmissible(reward, config.privacy.mode));
  const int64_t n = static_cast<int64_t>(prompts.size());
  if (n < 1) return absl::InvalidArgumentError("PPO prompt set is empty");
  if (config.batch_size > n) {
    return absl::InvalidArgumentError(
        absl::StrCat("PPO batch size ", config.batch_size, " exceeds |D3| = ", n));
  }
  const int64_t batches_per_epoch = std::max<int64_t>(1, n / config.batch_size);
  const int64_t total_batches = config.epochs * batches_per_epoch;
  const double q = static_cast<double>(config.batch_size) / static_cast<double>(n);
  ASSIGN_OR_RETURN(ResolvedPrivacy privacy, ResolvePrivacy(config.privacy, n, q, total_batches));
  const bool poisson = privacy.dp.mode == PrivacyMode::kDp || config.poisson_nonprivate;

  TinyLM policy = init;
  const TinyLM reference = init;
  const uint64_t reference_fingerprint = Fnv1a64(SerializeCheckpoint(reference));

  ASSIGN_OR_RETURN(std::vector<std::string> names,
                   TrainableParams(policy, config.train_mode, {"value_head"}));
  ASSIGN_OR_RETURN(TrainableSet trainable, TrainableSet::Create(policy.params(), names));
  AdamWConfig opt_config = config.optimizer;
  const int64_t steps_per_batch =
      (config.batch_size / config.minibatch_size) *
      (privacy.dp.mode == PrivacyMode::kDp ? 1 : config.ppo_epochs);
  opt_config.total_steps = total_batches * steps_per_batch;
  AdamW optimizer(opt_config, trainable);

  Rng sampling = Rng::Substream(config.seed, "ppo.sampling");
  Rng generation = Rng::Substream(config.seed, "ppo.generation");
  Rng shuffle = Rng::Substream(config.seed, "ppo.shuffle");
  Rng noise = Rng::Substream(config.seed, "ppo.noise");

  nlohmann::json epochs = nlohmann::json::array();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  int64_t batches_done = 0, total_steps = 0;
  double last_loss = 0.0, clipped_total = 0.0;
  int64_t clipped_batches = 0;
  std::optional<double> first_reward;
  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (!poisson) {
      for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[sampling.UniformInt(i + 1)]);
    }
    double epoch_reward = 0.0, epoch_kl = 0.0, epoch_score = 0.0;
    int64_t epoch_sequences = 0;
    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<int64_t> ids;
      if (poisson) {
        ASSIGN_OR_RETURN(ids, PoissonSample(n, q, sampling));
      } else {
        ids.assign(order.begin() + b * config.batch_size,
                   order.begin() + (b + 1) * config.batch_size);
      }
      ASSIGN_OR_RETURN(RolloutBatch batch,
                       Rollout(policy, reward, prompts, ids, config.generation, generation));
      RETURN_IF_ERROR(PrepareBatch(policy, reference, config, batch));
      ASSIGN_OR_RETURN(UpdateStats stats,
                       PpoUpdate(policy, optimizer, batch, privacy.dp, config, shuffle, noise));
      ++batches_done;
      total_steps += stats.optimizer_steps;
      double mean_reward = 0.0, mean_kl = 0.0, mean_score = 0.0;
      for (size_t i = 0; i < batch.size(); ++i) {
        mean_reward += batch.rewards[i];
        for (size_t t = 0; t < batch.logprobs[i].size(); ++t) {
          mean_kl += batch.logprobs[i][t] - batch.ref_logprobs[i][t];
          mean_score += batch.scores[i][t];
        }
      }
      epoch_reward += mean_reward;
      epoch_kl += mean_kl;
      epoch_score += mean_score;
      epoch_sequences += static_cast<int64_t>(batch.size());
      double eps_spent = kInfiniteEpsilon;
      if (privacy.certified) {
        ASSIGN_OR_RETURN(EpsilonResult e,
                         ComputeEpsilon({privacy.dp.noise_multiplier, q, batches_done},
                                        privacy.delta));
        eps_spent = e.epsilon;
      }
      nlohmann::json rec = {{"epoch", epoch},
                            {"batch", b},
                            {"batch_size", batch.size()},
                            {"optimizer_steps", stats.optimizer_steps},
                            {"eps_spent", EpsilonJson(eps_spent)}};
      if (batch.size() > 0) {
        const double size = static_cast<double>(batch.size());
        rec["mean_reward"] = mean_reward / size;
        rec["mean_kl"] = mean_kl / size;
        rec["loss_p"] = stats.loss_policy;
        rec["loss_v"] = stats.loss_value;
        last_loss = stats.loss_policy + stats.loss_value;
        if (!first_reward) first_reward = mean_reward / size;
      } else {
        rec["mean_reward"] = nullptr;
        rec["mean_kl"] = nullptr;
        rec["loss_p"] = nullptr;
        rec["loss_v"] = nullptr;
      }
      if (privacy.dp.mode == PrivacyMode::kDp) {
        rec["fraction_clipped"] = stats.fraction_clipped;
        clipped_total += stats.fraction_clipped;
        ++clipped_batches;
      }
      if (sink) sink(rec);
    }
    nlohmann::json e = {{"epoch", epoch}, {"sequences", epoch_sequences}};
    if (epoch_sequences > 0) {
      e["mean_reward"] = epoch_reward / epoch_sequences;
      e["mean_score"] = epoch_score / epoch_sequences;
      e["mean_kl"] = epoch_kl / epoch_sequences;
    }
    epochs.push_back(e);
  }
  if (Fnv1a64(SerializeCheckpoint(reference)) != reference_fingerprint) {
    return absl::InternalError("reference model changed during PPO");
  }
  StageReport local;
  StageReport& out = report ? *report : local;
  out.stage = "ppo";
  out.dataset_size = n;
  out.steps = total_steps;
  out.final_train_loss = last_loss;
  out.mean_fraction_clipped = clipped_batches ? clipped_total / clipped_batches : 0.0;
  out.mode = privacy.dp.mode;
  out.epsilon = privacy.epsilon;
  out.delta = privacy.delta;
  out.noise_multiplier = privacy.dp.noise_multiplier;
  out.sampling_prob = q;
  out.rdp_order = privacy.rdp_order;
  out.certified = privacy.certified;
  out.initial_mean_reward = first_reward;
  if (!epochs.empty() && epochs.back().contains("mean_reward")) {
    out.final_mean_reward = epochs.back()["mean_reward"].get<double>();
  }
  out.details = {{"batches", batches_done},
                 {"reward_function", reward.name()},
                 {"reference_unchanged", true},
                 {"epochs", epochs}};
  StampPrivacyMetadata(out, policy);
  return policy;
}

}  // namespace dpalign

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

#include <cmath>
#include <vector>

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "dpalign/accountant.h"
#include "dpalign/checkpoint.h"
#include "dpalign/tokenizer.h"
#include "tests/oracles.h"

namespace dpalign {
namespace {

using ::testing::HasSubstr;

std::vector<double> RandomVector(Rng& rng, size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.Normal();
  return v;
}

TEST(ComputeScoresTest, Examples) {
  auto s = ComputeScores(2.0, std::vector<double>{-1, -2, -0.5},
                         std::vector<double>{-1, -2, -1.0}, 0.2);
  ASSERT_TRUE(s.ok());
  EXPECT_EQ((*s)[0], 0.0);
  EXPECT_EQ((*s)[1], 0.0);
  EXPECT_NEAR((*s)[2], 1.9, 1e-15);
  // No KL coefficient: only the reward at the last token.
  s = ComputeScores(3.0, std::vector<double>{-1, -4}, std::vector<double>{-2, -1}, 0.0);
  ASSERT_TRUE(s.ok());
  EXPECT_EQ(*s, (std::vector<double>{0.0, 3.0}));
}

TEST(ComputeScoresTest, PolicyEqualToReferenceSumsToReward) {
  Rng rng(1);
  for (int batch = 0; batch < 100; ++batch) {
    for (int seq = 0; seq < 8; ++seq) {
      const size_t len = 1 + rng.UniformInt(16);
      const std::vector<double> p = RandomVector(rng, len);
      const double reward = 3 * rng.Normal();
      auto s = ComputeScores(reward, p, p, 0.05 + rng.Uniform());
      ASSERT_TRUE(s.ok());
      double sum = 0;
      for (double x : *s) sum += x;
      EXPECT_NEAR(sum, reward, 1e-9);
      EXPECT_EQ(s->back(), reward);
    }
  }
}

TEST(ComputeScoresTest, Errors) {
  EXPECT_FALSE(ComputeScores(1.0, std::vector<double>{1, 2}, std::vector<double>{1}, 0.2).ok());
  EXPECT_FALSE(ComputeScores(1.0, std::vector<double>{}, std::vector<double>{}, 0.2).ok());
}

TEST(AdvantagesTest, MatchesBruteForceDoubleSum) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const size_t len = 1 + rng.UniformInt(10);
    const std::vector<double> v = RandomVector(rng, len);
    const std::vector<double> s = RandomVector(rng, len);
    const double gamma = trial == 0 ? 0.97 : rng.Uniform();
    const double lambda = trial == 0 ? 0.95 : rng.Uniform();
    auto a = ComputeAdvantages(v, s, gamma, lambda);
    ASSERT_TRUE(a.ok());
    std::vector<double> want;
    testing::BruteForceGae(v, s, gamma, lambda, &want);
    for (size_t t = 0; t < len; ++t) {
      EXPECT_NEAR(a->advantages[t], want[t], 1e-6);
      EXPECT_DOUBLE_EQ(a->returns[t], a->advantages[t] + v[t]);
    }
  }
}

TEST(AdvantagesTest, BaseCases) {
  auto one = ComputeAdvantages(std::vector<double>{0.3}, std::vector<double>{1.5}, 0.9, 0.7);
  ASSERT_TRUE(one.ok());
  EXPECT_DOUBLE_EQ(one->advantages[0], 1.5 - 0.3);
  const std::vector<double> v = {0.5, -0.25, 1.0, 2.0};
  const std::vector<double> s = {0.1, 0.2, -0.3, 1.0};
  auto td = ComputeAdvantages(v, s, 0.9, 0.0);
  ASSERT_TRUE(td.ok());
  for (size_t t = 0; t < v.size(); ++t) {
    const double next = t + 1 < v.size() ? v[t + 1] : 0.0;
    EXPECT_DOUBLE_EQ(td->advantages[t], s[t] + 0.9 * next - v[t]);
  }
  EXPECT_FALSE(ComputeAdvantages(std::vector<double>{}, std::vector<double>{}, 1, 1).ok());
}

PPOConfig LossConfig() {
  PPOConfig c;
  c.gamma = 1.0;
  c.lambda = 0.95;
  c.clip_range = 0.2;
  c.value_coef = 0.1;
  return c;
}

TEST(PpoLossTest, RatioOneGivesNegativeMeanAdvantage) {
  const PPOConfig c = LossConfig();
  const std::vector<double> p = {-1.0, -2.0, -0.5};
  const std::vector<double> v = {0.2, -0.1, 0.4};
  const std::vector<double> s = {0.0, -0.1, 2.0};
  auto adv = ComputeAdvantages(v, s, c.gamma, c.lambda).value();
  auto loss = PpoLoss(p, v, s, p, v, c);
  ASSERT_TRUE(loss.ok());
  double mean = 0;
  for (double a : adv.advantages) mean += a;
  mean /= 3;
  EXPECT_NEAR(loss->policy, -mean, 1e-12);
}

TEST(PpoLossTest, ClippedBranchForPositiveAdvantage) {
  const PPOConfig c = LossConfig();
  // Single token: A = s - v.
  const std::vector<double> v = {0.0}, s = {1.5}, old = {-1.0};
  const std::vector<double> p = {-1.0 + std::log(1 + 2 * c.clip_range)};
  auto loss = PpoLoss(old, v, s, p, v, c);
  ASSERT_TRUE(loss.ok());
  EXPECT_NEAR(loss->policy, -(1 + c.clip_range) * 1.5, 1e-12);
}

TEST(PpoLossTest, ValueLossVanishesAtTarget) {
  const PPOConfig c = LossConfig();
  const std::vector<double> old_v = {0.3, -0.2, 0.1}, s = {0.0, 0.5, 1.0}, p = {-1, -1, -1};
  auto adv = ComputeAdvantages(old_v, s, c.gamma, c.lambda).value();
  std::vector<double> target(3);
  for (int t = 0; t < 3; ++t) target[t] = adv.advantages[t] + old_v[t];
  auto loss = PpoLoss(p, old_v, s, p, target, c);
  ASSERT_TRUE(loss.ok());
  EXPECT_NEAR(loss->value, 0.0, 1e-24);
  std::vector<double> off = target;
  off[1] += 1.0;
  EXPECT_NEAR(PpoLoss(p, old_v, s, p, off, c)->value, c.value_coef / 3, 1e-12);
}

TEST(PpoLossTest, InvariantToRatioBeyondClipWindowOnClippedBranch) {
  const PPOConfig c = LossConfig();
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = (trial % 2 ? 1 : -1) * (0.1 + rng.Uniform());
    const std::vector<double> v = {0.0}, s = {a}, old = {-1.0};
    // Past the window on the side where the clipped term is the maximum.
    const double past =
        a > 0 ? std::log(1 + c.clip_range) + 0.01 + rng.Uniform()
              : std::log(1 - c.clip_range) - 0.01 - rng.Uniform();
    const double further = past + (a > 0 ? 1 : -1) * rng.Uniform();
    auto l1 = PpoLoss(old, v, s, std::vector<double>{old[0] + past}, v, c);
    auto l2 = PpoLoss(old, v, s, std::vector<double>{old[0] + further}, v, c);
    ASSERT_TRUE(l1.ok() && l2.ok());
    EXPECT_EQ(l1->policy, l2->policy);
    const double bound = a > 0 ? 1 + c.clip_range : 1 - c.clip_range;
    EXPECT_NEAR(l1->policy, -bound * a, 1e-12);
  }
}

TEST(PpoLossTest, HugeLogRatioIsClampedFinite) {
  const PPOConfig c = LossConfig();
  auto loss = PpoLoss(std::vector<double>{-500.0}, std::vector<double>{0.0},
                      std::vector<double>{-1.0}, std::vector<double>{0.0},
                      std::vector<double>{0.0}, c);
  ASSERT_TRUE(loss.ok());
  EXPECT_NEAR(loss->policy, std::exp(20.0), 1e-3);
}

TEST(PpoLossTest, TapeFormMatchesValues) {
  const PPOConfig c = LossConfig();
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 1 + rng.UniformInt(8);
    const auto old_p = RandomVector(rng, n), old_v = RandomVector(rng, n), s = RandomVector(rng, n);
    auto p = old_p;
    for (double& x : p) x += 0.3 * rng.Normal();
    const auto v = RandomVector(rng, n);
    auto want = PpoLoss(old_p, old_v, s, p, v, c).value();
    auto adv = ComputeAdvantages(old_v, s, c.gamma, c.lambda).value();
    Tape tape;
    Var pv = tape.Constant(Tensor({static_cast<int64_t>(n)}, p));
    Var vv = tape.Constant(Tensor({static_cast<int64_t>(n)}, v));
    PpoLossVars got = PpoLossOnTape(pv, vv, old_p, old_v, adv.advantages, c);
    ASSERT_TRUE(tape.status().ok());
    EXPECT_NEAR(got.policy.value().item(), want.policy, 1e-12);
    EXPECT_NEAR(got.value.value().item(), want.value, 1e-12);
  }
}

TinyLMConfig SmallConfig() {
  TinyLMConfig c;
  c.context_len = 32;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.adapter_rank = 2;
  c.seed = 5;
  return c;
}

TinyLM Policy() {
  TinyLM m = TinyLM::Create(SmallConfig()).value();
  Rng rng(6);
  for (const std::string& n : m.params().names()) {
    for (double& x : m.mutable_params().GetMutable(n).data()) x += 0.2 * rng.Normal();
  }
  m.mutable_params().RoundToFloat();
  return m;
}

std::vector<std::string> Prompts(int n) {
  const char* subjects[] = {"the movie", "the plot", "the cast", "the music"};
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(std::string(subjects[i % 4]) + " was");
  return out;
}

PPOConfig SmallPpo() {
  PPOConfig c;
  c.batch_size = 8;
  c.minibatch_size = 2;
  c.epochs = 1;
  c.generation.max_new = 6;
  c.optimizer.lr = 1e-2;
  c.seed = 7;
  return c;
}

// Fails on the n-th call.
class FlakyReward : public RewardFunction {
 public:
  explicit FlakyReward(int fail_at) : fail_at_(fail_at) {}
  absl::StatusOr<double> Score(const TokenSeq&, const TokenSeq&) const override {
    if (++calls_ == fail_at_) return absl::UnavailableError("scorer down");
    return 1.0;
  }
  std::string name() const override { return "flaky"; }
  bool is_public() const override { return true; }
  bool dp_certified() const override { return false; }

 private:
  int fail_at_;
  mutable int calls_ = 0;
};

TEST(RolloutTest, GenerationLogprobsReproducedByForwardPass) {
  const TinyLM policy = Policy();
  const LexiconRewardFunction reward(DefaultOracle());
  const std::vector<std::string> prompts = Prompts(6);
  const std::vector<int64_t> ids = {0, 1, 2, 3, 4, 5};
  Rng rng(8);
  auto batch = Rollout(policy, reward, prompts, ids, SmallPpo().generation, rng);
  ASSERT_TRUE(batch.ok()) << batch.status();
  for (size_t i = 0; i < batch->size(); ++i) {
    auto heads = ForwardHeads(policy, batch->prompts[i], batch->responses[i]);
    ASSERT_TRUE(heads.ok());
    EXPECT_EQ(heads->logprobs, batch->generation_logprobs[i]);
    EXPECT_EQ(batch->rewards[i], LexiconReward(DefaultOracle(), batch->responses[i]));
  }
  ASSERT_TRUE(PrepareBatch(policy, policy, SmallPpo(), *batch).ok());
  for (size_t i = 0; i < batch->size(); ++i) {
    EXPECT_EQ(batch->logprobs[i], batch->generation_logprobs[i]);
    double sum = 0;
    for (double s : batch->scores[i]) sum += s;
    EXPECT_NEAR(sum, batch->rewards[i], 1e-12);
  }
}

TEST(RolloutTest, GreedyDecodingIsBitIdenticalAcrossRuns) {
  const TinyLM policy = Policy();
  const LexiconRewardFunction reward(DefaultOracle());
  GenerationConfig greedy = SmallPpo().generation;
  greedy.temperature = 0;
  const std::vector<int64_t> ids = {3, 1, 2};
  Rng a(9), b(10);
  auto x = Rollout(policy, reward, Prompts(4), ids, greedy, a);
  auto y = Rollout(policy, reward, Prompts(4), ids, greedy, b);
  ASSERT_TRUE(x.ok() && y.ok());
  EXPECT_EQ(x->responses, y->responses);
  EXPECT_EQ(x->generation_logprobs, y->generation_logprobs);
  EXPECT_EQ(x->rewards, y->rewards);
}

TEST(RolloutTest, RewardFailureAbortsBatchWithoutSteps) {
  FlakyReward reward(3);
  Rng rng(11);
  auto batch = Rollout(Policy(), reward, Prompts(5), std::vector<int64_t>{0, 1, 2, 3},
                       SmallPpo().generation, rng);
  EXPECT_EQ(batch.status().code(), absl::StatusCode::kUnavailable);
  EXPECT_THAT(batch.status().message(), HasSubstr("batch aborted"));

  FlakyReward stage_reward(2);
  int records = 0;
  StageReport report;
  auto out = RunPpoStage(Policy(), Prompts(16), stage_reward, SmallPpo(), &report,
                         [&](const nlohmann::json&) { ++records; });
  EXPECT_FALSE(out.ok());
  EXPECT_EQ(records, 0);
}

struct PreparedBatch {
  TinyLM policy;
  RolloutBatch batch;
};

PreparedBatch Prepare(const PPOConfig& config) {
  PreparedBatch out{Policy(), {}};
  const LexiconRewardFunction reward(DefaultOracle());
  std::vector<int64_t> ids(config.batch_size);
  for (int64_t i = 0; i < config.batch_size; ++i) ids[i] = i;
  Rng rng(12);
  out.batch = Rollout(out.policy, reward, Prompts(config.batch_size), ids, config.generation, rng)
                  .value();
  EXPECT_TRUE(PrepareBatch(out.policy, out.policy, config, out.batch).ok());
  return out;
}

AdamW OptimizerFor(const TinyLM& policy, const PPOConfig& config) {
  auto trainable = TrainableSet::Create(policy.params(), policy.params().names()).value();
  return AdamW(config.optimizer, trainable);
}

TEST(PpoUpdateTest, NonprivateStepCountIsEpochsTimesChunks) {
  PPOConfig c = SmallPpo();
  c.ppo_epochs = 4;
  PreparedBatch p = Prepare(c);
  AdamW opt = OptimizerFor(p.policy, c);
  Rng shuffle(1), noise(2);
  DPConfig dp;
  auto stats = PpoUpdate(p.policy, opt, p.batch, dp, c, shuffle, noise);
  ASSERT_TRUE(stats.ok()) << stats.status();
  EXPECT_EQ(stats->optimizer_steps, 4 * (c.batch_size / c.minibatch_size));
  EXPECT_EQ(opt.step(), 16);
  EXPECT_EQ(noise.draws(), 0u);
}

TEST(PpoUpdateTest, DpTakesOneStepPerChunk) {
  PPOConfig c = SmallPpo();
  PreparedBatch p = Prepare(c);
  AdamW opt = OptimizerFor(p.policy, c);
  Rng shuffle(1), noise(2);
  DPConfig dp;
  dp.mode = PrivacyMode::kDp;
  dp.noise_multiplier = 1.0;
  dp.clip_norm = 0.5;
  auto stats = PpoUpdate(p.policy, opt, p.batch, dp, c, shuffle, noise);
  ASSERT_TRUE(stats.ok()) << stats.status();
  EXPECT_EQ(stats->optimizer_steps, c.batch_size / c.minibatch_size);
  EXPECT_GT(noise.draws(), 0u);

  c.ppo_epochs = 2;
  auto refused = PpoUpdate(p.policy, opt, p.batch, dp, c, shuffle, noise);
  EXPECT_EQ(refused.status().code(), absl::StatusCode::kFailedPrecondition);
}

TEST(PpoStageTest, DpRefusesMultiplePasses) {
  PPOConfig c = SmallPpo();
  c.privacy.mode = PrivacyMode::kDp;
  c.privacy.noise_multiplier = 1.0;
  c.ppo_epochs = 2;
  StageReport report;
  auto out = RunPpoStage(Policy(), Prompts(16), LexiconRewardFunction(DefaultOracle()), c, &report);
  EXPECT_EQ(out.status().code(), absl::StatusCode::kFailedPrecondition);
  EXPECT_THAT(out.status().message(),
              HasSubstr("invalidates the privacy amplification by subsampling"));
}

TEST(PpoStageTest, DpRefusesUncertifiedRewardModel) {
  PPOConfig c = SmallPpo();
  c.privacy.mode = PrivacyMode::kDp;
  c.privacy.noise_multiplier = 1.0;
  TinyLM rm = Policy();
  rm.metadata()["dp_certified"] = "false";
  StageReport report;
  auto out = RunPpoStage(Policy(), Prompts(16), ModelRewardFunction(rm), c, &report);
  EXPECT_EQ(out.status().code(), absl::StatusCode::kFailedPrecondition);
  EXPECT_FALSE(CheckRewardAdmissible(ModelRewardFunction(Policy()), PrivacyMode::kDp).ok());

  // Certified, public and lexicon rewards are all admissible.
  rm.metadata()["dp_certified"] = "true";
  EXPECT_TRUE(CheckRewardAdmissible(ModelRewardFunction(rm), PrivacyMode::kDp).ok());
  EXPECT_TRUE(CheckRewardAdmissible(ModelRewardFunction(Policy(), true), PrivacyMode::kDp).ok());
  EXPECT_TRUE(
      CheckRewardAdmissible(LexiconRewardFunction(DefaultOracle()), PrivacyMode::kDp).ok());
  EXPECT_TRUE(CheckRewardAdmissible(ModelRewardFunction(Policy()), PrivacyMode::kNonprivate).ok());
}

TEST(PpoStageTest, DpChargesOneMechanismPerBatch) {
  PPOConfig c = SmallPpo();
  c.epochs = 2;
  c.privacy.mode = PrivacyMode::kDp;
  c.privacy.noise_multiplier = 1.0;
  const std::vector<std::string> prompts = Prompts(40);
  const TinyLM init = Policy();
  const std::string init_bytes = SerializeCheckpoint(init);
  std::vector<nlohmann::json> records;
  StageReport report;
  auto out = RunPpoStage(init, prompts, LexiconRewardFunction(DefaultOracle()), c, &report,
                         [&](const nlohmann::json& j) { records.push_back(j); });
  ASSERT_TRUE(out.ok()) << out.status();
  EXPECT_EQ(SerializeCheckpoint(init), init_bytes);
  EXPECT_TRUE(report.details["reference_unchanged"].get<bool>());
  const int64_t batches = 2 * (40 / 8);
  EXPECT_EQ(report.details["batches"].get<int64_t>(), batches);
  EXPECT_EQ(report.steps, batches * (c.batch_size / c.minibatch_size));
  EXPECT_DOUBLE_EQ(report.sampling_prob, 8.0 / 40.0);
  EXPECT_DOUBLE_EQ(report.delta, 1.0 / 40);
  auto eps = ComputeEpsilon({1.0, 0.2, batches}, report.delta).value();
  EXPECT_DOUBLE_EQ(report.epsilon, eps.epsilon);
  ASSERT_EQ(records.size(), static_cast<size_t>(batches));
  EXPECT_DOUBLE_EQ(records.back()["eps_spent"].get<double>(), report.epsilon);
  for (const auto& r : records) {
    for (const char* key : {"epoch", "batch", "mean_reward", "mean_kl", "loss_p", "loss_v",
                            "eps_spent"}) {
      EXPECT_TRUE(r.contains(key)) << key;
    }
  }
  EXPECT_EQ(out->metadata().at("dp_certified"), "true");
  EXPECT_NE(SerializeCheckpoint(*out), init_bytes);
}

TEST(PpoStageTest, DiagnosticZeroNoiseMatchesNonprivateTrajectory) {
  PPOConfig nonprivate = SmallPpo();
  nonprivate.epochs = 2;
  nonprivate.poisson_nonprivate = true;
  PPOConfig dp = nonprivate;
  dp.privacy.mode = PrivacyMode::kDp;
  dp.privacy.diagnostic_zero_noise = true;
  dp.privacy.clip_norm = 1e9;
  const std::vector<std::string> prompts = Prompts(24);
  StageReport r1, r2;
  auto a = RunPpoStage(Policy(), prompts, LexiconRewardFunction(DefaultOracle()), nonprivate, &r1);
  auto b = RunPpoStage(Policy(), prompts, LexiconRewardFunction(DefaultOracle()), dp, &r2);
  ASSERT_TRUE(a.ok() && b.ok()) << a.status() << b.status();
  EXPECT_EQ(r1.steps, r2.steps);
  EXPECT_FALSE(r2.certified);
  EXPECT_TRUE(std::isinf(r2.epsilon));
  double worst = 0;
  for (const std::string& n : a->params().names()) {
    const auto& x = a->params().Get(n).data();
    const auto& y = b->params().Get(n).data();
    for (size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_GT(r1.steps, 0);
}

TEST(PpoStageTest, SameSeedSameCheckpoint) {
  PPOConfig c = SmallPpo();
  c.privacy.mode = PrivacyMode::kDp;
  c.privacy.noise_multiplier = 0.8;
  StageReport r;
  auto a = RunPpoStage(Policy(), Prompts(16), LexiconRewardFunction(DefaultOracle()), c, &r);
  auto b = RunPpoStage(Policy(), Prompts(16), LexiconRewardFunction(DefaultOracle()), c, &r);
  ASSERT_TRUE(a.ok() && b.ok());
  EXPECT_EQ(SerializeCheckpoint(*a), SerializeCheckpoint(*b));
}

TEST(PpoConfigTest, Validation) {
  PPOConfig c = SmallPpo();
  EXPECT_TRUE(c.Validate().ok());
  c.minibatch_size = 3;
  EXPECT_FALSE(c.Validate().ok());
  c = SmallPpo();
  c.clip_range = 0;
  EXPECT_FALSE(c.Validate().ok());
  c = SmallPpo();
  c.ppo_epochs = 3;
  EXPECT_TRUE(c.Validate().ok());
  c.privacy.mode = PrivacyMode::kDp;
  EXPECT_EQ(c.Validate().code(), absl::StatusCode::kFailedPrecondition);
}

}  // namespace
}  // namespace dpalign

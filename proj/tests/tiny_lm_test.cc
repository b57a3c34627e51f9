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

#include "dpalign/tiny_lm.h"

#include <cmath>
#include <set>

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "dpalign/checkpoint.h"

namespace dpalign {
namespace {

TinyLMConfig SmallConfig(int rank = 2) {
  TinyLMConfig c;
  c.context_len = 24;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.adapter_rank = rank;
  c.seed = 9;
  return c;
}

TinyLM Perturbed(TinyLM m, uint64_t seed, double scale) {
  // Random  weights everywhere (including adapter B and heads) so that no
  // component is trivially zero.
  Rng rng(seed);
  for (const std::string& n : m.params().names()) {
    for (double& x : m.mutable_params().GetMutable(n).data()) x += scale * rng.Normal();
  }
  m.mutable_params().RoundToFloat();
  return m;
}

TEST(TinyLMTest, ConfigValidation) {
  TinyLMConfig c = SmallConfig();
  c.n_heads = 3;
  EXPECT_FALSE(TinyLM::Create(c).ok());
  c = SmallConfig();
  c.vocab_size = 1;
  EXPECT_FALSE(TinyLM::Create(c).ok());
  c = SmallConfig();
  c.adapter_rank = -1;
  EXPECT_FALSE(TinyLM::Create(c).ok());
}

TEST(TinyLMTest, ZeroWeightsGiveUniformLogProbs) {
  TinyLM m = *TinyLM::Create(SmallConfig());
  for (const std::string& n : m.params().names()) {
    for (double& x : m.mutable_params().GetMutable(n).data()) x = 0.0;
  }
  auto out = ForwardHeads(m, EncodePrompt("ab"), EncodeBytes("xyz"));
  ASSERT_TRUE(out.ok()) << out.status();
  for (double p : out->logprobs) EXPECT_NEAR(p, -std::log(259.0), 1e-12);
}

TEST(TinyLMTest, LogSoftmaxNormalizedAtEveryPosition) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 1, 0.3);
  auto out = ForwardHeads(m, EncodePrompt("hello"), EncodeBytes(" world"));
  ASSERT_TRUE(out.ok());
  const Tensor& l = out->logits;
  for (int64_t r = 0; r < l.rows(); ++r) {
    double mx = -INFINITY;
    for (int64_t c = 0; c < l.cols(); ++c) mx = std::max(mx, l.at(r, c));
    double z = 0.0;
    for (int64_t c = 0; c < l.cols(); ++c) z += std::exp(l.at(r, c) - mx);
    double total = 0.0;
    for (int64_t c = 0; c < l.cols(); ++c) total += std::exp(l.at(r, c) - mx - std::log(z));
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_LE(out->logprobs[r], 0.0);
  }
}

TEST(TinyLMTest, GenerationLogProbsMatchForwardExactly) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 2, 0.3);
  Rng rng(3);
  TokenSeq prompt = EncodePrompt("the");
  GenerationConfig gen;
  gen.max_new = 12;
  gen.stop_at_eos = false;
  auto g = Generate(m, prompt, gen, rng);
  ASSERT_TRUE(g.ok());
  ASSERT_EQ(g->tokens.size(), 12u);
  auto out = ForwardHeads(m, prompt, g->tokens);
  ASSERT_TRUE(out.ok());
  EXPECT_EQ(out->logprobs, g->logprobs);
}

TEST(TinyLMTest, GreedyDecodingIsDeterministicAndEqualsTopOne) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 4, 0.5);
  GenerationConfig greedy;
  greedy.max_new = 8;
  greedy.temperature = 0.0;
  Rng r1(1), r2(99);
  auto a = Generate(m, EncodePrompt("a"), greedy, r1);
  auto b = Generate(m, EncodePrompt("a"), greedy, r2);
  GenerationConfig top1;
  top1.max_new = 8;
  top1.top_k = 1;
  Rng r3(5);
  auto c = Generate(m, EncodePrompt("a"), top1, r3);
  ASSERT_TRUE(a.ok() && b.ok() && c.ok());
  EXPECT_EQ(a->tokens, b->tokens);
  EXPECT_EQ(a->tokens, c->tokens);
}

TEST(TinyLMTest, SampledDecodingIsDeterministicGivenSeed) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 4, 0.5);
  GenerationConfig gen;
  gen.max_new = 10;
  gen.top_k = 5;
  Rng r1(17), r2(17);
  EXPECT_EQ(Generate(m, EncodePrompt("q"), gen, r1)->tokens,
            Generate(m, EncodePrompt("q"), gen, r2)->tokens);
}

TEST(TinyLMTest, OverlengthIsAnError) {
  TinyLM m = *TinyLM::Create(SmallConfig());
  GenerationConfig gen;
  gen.max_new = 20;
  Rng rng(1);
  EXPECT_EQ(Generate(m, EncodePrompt("abcdefghij"), gen, rng).status().code(),
            absl::StatusCode::kInvalidArgument);
  EXPECT_FALSE(ForwardHeads(m, EncodePrompt("abcdefghijklmnop"), EncodeBytes("qrstuvwxyz")).ok());
  gen.max_new = 0;
  EXPECT_FALSE(Generate(m, EncodePrompt("a"), gen, rng).ok());
}

TEST(TinyLMTest, NextTokenFrequenciesMatchSoftmax) {
  TinyLMConfig c;
  c.vocab_size = 3;
  c.context_len = 4;
  c.d_model = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.adapter_rank = 0;
  c.seed = 1;
  TinyLM m = Perturbed(*TinyLM::Create(c), 8, 1.0);
  TokenSeq prompt = {0};
  // Probabilities of the three possible next tokens from the forward pass.
  std::vector<double> probs;
  for (int t = 0; t < 3; ++t) probs.push_back(std::exp(ForwardHeads(m, prompt, {t})->logprobs[0]));
  GenerationConfig gen;
  gen.max_new = 1;
  gen.stop_at_eos = false;
  Rng rng(2024);
  const int n = 100000;
  std::vector<int> counts(3, 0);
  for (int i = 0; i < n; ++i) ++counts[Generate(m, prompt, gen, rng)->tokens[0]];
  for (int t = 0; t < 3; ++t) {
    const double mean = n * probs[t];
    const double sd = std::sqrt(n * probs[t] * (1 - probs[t]));
    EXPECT_LE(std::abs(counts[t] - mean), 3 * sd) << "token " << t;
  }
}

TEST(TinyLMTest, CausalityOfLogProbs) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 5, 0.3);
  TokenSeq prompt = EncodePrompt("xy");
  TokenSeq r1 = EncodeBytes("abcdef");
  for (size_t t = 0; t < r1.size(); ++t) {
    TokenSeq r2 = r1;
    r2[t] = 'Z';
    auto a = ForwardHeads(m, prompt, r1);
    auto b = ForwardHeads(m, prompt, r2);
    for (size_t u = 0; u < t; ++u) EXPECT_EQ(a->logprobs[u], b->logprobs[u]);
    // Values at row u see response[<u] only, so u <= t are unchanged too.
    for (size_t u = 0; u <= t; ++u) EXPECT_EQ(a->values[u], b->values[u]);
  }
}

TEST(TinyLMTest, FreshAdaptersLeaveOutputsBitIdentical) {
  TinyLM base = *TinyLM::Create(SmallConfig(0));
  TinyLM adapted = *TinyLM::Create(SmallConfig(4));
  for (const std::string& n : base.params().names()) {
    ASSERT_EQ(base.params().Get(n), adapted.params().Get(n)) << n;
  }
  auto a = ForwardHeads(base, EncodePrompt("same"), EncodeBytes("input"));
  auto b = ForwardHeads(adapted, EncodePrompt("same"), EncodeBytes("input"));
  EXPECT_EQ(a->logprobs, b->logprobs);
  EXPECT_EQ(a->logits, b->logits);
  EXPECT_EQ(a->values, b->values);
}

TEST(TinyLMTest, RewardHeadReadout) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 6, 0.3);
  TokenSeq prompt = EncodePrompt("p");
  TokenSeq resp = EncodeBytes("resp");
  TokenSeq padded = resp;
  padded.insert(padded.end(), 3, kPadToken);
  EXPECT_EQ(*RewardScore(m, prompt, resp), *RewardScore(m, prompt, padded));

  TinyLM zero = m;
  for (const std::string& n : HeadParams("reward_head")) {
    for (double& x : zero.mutable_params().GetMutable(n).data()) x = 0.0;
  }
  EXPECT_EQ(*RewardScore(zero, prompt, resp), 0.0);
  EXPECT_EQ(RewardScore(m, prompt, {}).status().code(),
            absl::StatusCode::kInvalidArgument);
  EXPECT_FALSE(RewardScore(m, prompt, {kPadToken}).ok());
}

TEST(TinyLMTest, DistinctResponsesGetDistinctScores) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 1000 + i, 0.2);
    TokenSeq a, b;
    for (int j = 0; j < 5; ++j) a.push_back(static_cast<int>(rng.UniformInt(256)));
    b = a;
    b[rng.UniformInt(5)] ^= 1 + static_cast<int>(rng.UniformInt(255));
    EXPECT_NE(*RewardScore(m, EncodePrompt("x"), a), *RewardScore(m, EncodePrompt("x"), b));
  }
}

TEST(TinyLMTest, TrainableParamSelection) {
  TinyLM full0 = *TinyLM::Create(SmallConfig(0));
  EXPECT_EQ(*TrainableParams(full0, TrainMode::kFull, {}), full0.params().names());
  EXPECT_EQ(TrainableParams(full0, TrainMode::kAdaptersOnly, {}).status().code(),
            absl::StatusCode::kInvalidArgument);

  TinyLMConfig c = SmallConfig(4);
  TinyLM m = *TinyLM::Create(c);
  auto names = TrainableParams(m, TrainMode::kAdaptersOnly, {"value_head"});
  ASSERT_TRUE(names.ok());
  int64_t count = 0;
  for (const std::string& n : *names) count += m.params().Get(n).size();
  // Two adapted d x d matrices per layer, each r*(d_in + d_out), plus the
  // value head (d weights + 1 bias).
  const int64_t expected = c.n_layers * 2 * c.adapter_rank * (c.d_model + c.d_model) + c.d_model + 1;
  EXPECT_EQ(count, expected);
  for (const std::string& n : *names) {
    EXPECT_TRUE(n.find("lora") != std::string::npos || n.find("value_head") == 0) << n;
  }
}

TEST(CheckpointTest, RoundTripIsByteStable) {
  TinyLM m = Perturbed(*TinyLM::Create(SmallConfig()), 10, 0.1);
  m.metadata()["dp_certified"] = "true";
  m.metadata()["epsilon"] = "4";
  const std::string bytes = SerializeCheckpoint(m);
  EXPECT_EQ(bytes.substr(0, 4), "DPAL");
  auto loaded = ParseCheckpoint(bytes);
  ASSERT_TRUE(loaded.ok()) << loaded.status();
  EXPECT_EQ(SerializeCheckpoint(*loaded), bytes);
  EXPECT_EQ(*loaded, m);
  EXPECT_EQ(loaded->metadata().at("dp_certified"), "true");
}

TEST(CheckpointTest, CorruptInputsRejected) {
  TinyLM m = *TinyLM::Create(SmallConfig());
  std::string bytes = SerializeCheckpoint(m);
  EXPECT_FALSE(ParseCheckpoint("XXXX" + bytes.substr(4)).ok());
  EXPECT_FALSE(ParseCheckpoint(bytes.substr(0, bytes.size() - 3)).ok());
  EXPECT_FALSE(ParseCheckpoint(bytes + "x").ok());
}

}  // namespace
}  // namespace dpalign

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

#ifndef DPALIGN_TINY_LM_H_
#define DPALIGN_TINY_LM_H_

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "dpalign/parameters.h"
#include "dpalign/rng.h"
#include "dpalign/tokenizer.h"

namespace dpalign {

struct TinyLMConfig {
  int vocab_size = kByteVocabSize;
  int context_len = 128;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  // Rank of the low-rank adapters on attention query/value; 0 disables them.
  int adapter_rank = 4;
  uint64_t seed = 0;

  absl::Status Validate() const;
  friend bool operator==(const TinyLMConfig&, const TinyLMConfig&) = default;
};

// Causal transformer with a generation head, a per-token value head and a
// per-sequence reward head. All three read the final hidden state.
class TinyLM {
 public:
  static absl::StatusOr<TinyLM> Create(const TinyLMConfig& config);

  const TinyLMConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& mutable_params() { return params_; }

  // Free-form provenance carried through checkpoints, e.g. dp certificates.
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  // Names of the adapted attention matrices and their adapter factors.
  std::vector<std::string> AdaptedMatrices() const;
  static std::string AdapterA(const std::string& matrix) { return matrix + ".lora_a"; }
  static std::string AdapterB(const std::string& matrix) { return matrix + ".lora_b"; }

  friend bool operator==(const TinyLM&, const TinyLM&) = default;

 private:
  TinyLM(TinyLMConfig config, ParameterSet params)
      : config_(config), params_(std::move(params)) {}
  friend absl::StatusOr<TinyLM> MakeTinyLM(TinyLMConfig, ParameterSet,
                                           std::map<std::string, std::string>);

  TinyLMConfig config_;
  ParameterSet params_;
  std::map<std::string, std::string> metadata_;
};

// Assembles a model from existing parameters (used by checkpoint loading).
absl::StatusOr<TinyLM> MakeTinyLM(TinyLMConfig config, ParameterSet params,
                                  std::map<std::string, std::string> metadata);

// Tape-level forward pass. Rows of `logits`, `logprobs` and `values` are the
// response positions: row t is predicted from prompt + response[<t].
struct HeadVars {
  Var logprobs;  // [R]
  Var logits;    // [R, V]
  Var values;    // [R]
};

HeadVars ForwardHeadsOnTape(const TinyLMConfig& config, BoundParams& params,
                            const TokenSeq& prompt, const TokenSeq& response);
// Scalar reward read at the final non-pad response token.
Var RewardScoreOnTape(const TinyLMConfig& config, BoundParams& params,
                      const TokenSeq& prompt, const TokenSeq& response);

struct HeadOutputs {
  std::vector<double> logprobs;
  Tensor logits;
  std::vector<double> values;
};

absl::StatusOr<HeadOutputs> ForwardHeads(const TinyLM& model,
                                         const TokenSeq& prompt,
                                         const TokenSeq& response);
absl::StatusOr<double> RewardScore(const TinyLM& model, const TokenSeq& prompt,
                                   const TokenSeq& response);

struct GenerationConfig {
  int max_new = 16;
  // 0 selects argmax decoding.
  double temperature = 1.0;
  // 0 disables top-k filtering.
  int top_k = 0;
  bool stop_at_eos = true;
};

struct Generation {
  TokenSeq tokens;
  // Untempered model log-probability of each generated token.
  std::vector<double> logprobs;
};

absl::StatusOr<Generation> Generate(const TinyLM& model, const TokenSeq& prompt,
                                    const GenerationConfig& gen, Rng& rng);

enum class TrainMode { kFull, kAdaptersOnly };

// Parameter names that receive gradients. In adapters-only mode this is the
// adapter factors plus the requested heads (e.g. "value_head").
absl::StatusOr<std::vector<std::string>> TrainableParams(
    const TinyLM& model, TrainMode mode, const std::set<std::string>& heads);

// Names of the parameters of a head ("lm_head", "value_head", "reward_head").
std::vector<std::string> HeadParams(const std::string& head);

}  // namespace dpalign

#endif  // DPALIGN_TINY_LM_H_

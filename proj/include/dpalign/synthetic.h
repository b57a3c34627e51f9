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

#ifndef DPALIGN_SYNTHETIC_H_
#define DPALIGN_SYNTHETIC_H_

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "dpalign/datasets.h"
#include "dpalign/rng.h"
#include "dpalign/tiny_lm.h"

namespace dpalign {

// Scores text by lexicon membership of its words. A word is a maximal run of
// ASCII letters, compared lowercase.
struct SyntheticOracle {
  std::set<std::string> positive;
  std::set<std::string> negative;
  // Probability that a synthesized preference bit is flipped.
  double noise_rate = 0.0;

  // Lexicons disjoint and noise_rate in [0, 0.5).
  absl::Status Validate() const;
};

SyntheticOracle DefaultOracle(double noise_rate = 0.0);

std::vector<std::string> SplitWords(std::string_view text);

// #positive words - #negative words.
double LexiconReward(const SyntheticOracle& oracle, std::string_view text);
double LexiconReward(const SyntheticOracle& oracle, const TokenSeq& tokens);

struct CorpusConfig {
  int64_t size = 4000;
  // Fraction of the oracle's lexicon that the corpus uses for its own
  // sentiment words; the rest of the corpus sentiment vocabulary is outside
  // the oracle's lexicon.
  double lexicon_overlap = 0.5;
  // Number of leading words that form the prompt.
  int prompt_words = 3;

  absl::Status Validate() const;
};

struct CorpusRecord {
  std::string id;
  std::string text;
};

// Short review-like sentences over a fixed vocabulary. Record ids are
// "<id_prefix><index>".
absl::StatusOr<std::vector<CorpusRecord>> GenerateCorpus(
    const CorpusConfig& config, const SyntheticOracle& oracle, Rng& rng,
    const std::string& id_prefix = "r");

// Prompt is the first `prompt_words` words; target is the rest, with its
// leading space.
SftExample SplitPromptTarget(const std::string& text, int prompt_words);

absl::StatusOr<std::vector<CorpusRecord>> ParseCorpus(std::string_view contents);
std::string FormatCorpus(const std::vector<CorpusRecord>& records);

enum class TiePolicy { kCoin, kResample };

struct PreferenceSynthConfig {
  GenerationConfig generation;
  TiePolicy ties = TiePolicy::kCoin;
  // Extra draws of the second completion when resampling.
  int max_resamples = 8;
};

struct PreferenceSynthStats {
  int64_t records = 0;
  int64_t flipped = 0;
  int64_t coin_ties = 0;
  // Prompts dropped after exhausting resamples, or with identical or empty
  // completions.
  int64_t dropped = 0;
};

// Two sampled completions per prompt; b is the index of the higher lexicon
// reward, then flipped with probability noise_rate. Ties go to a fair coin,
// or under kResample the second completion is redrawn.
absl::StatusOr<std::vector<PreferenceRecord>> SynthesizePreferences(
    const TinyLM& model, const std::vector<std::string>& prompts,
    const SyntheticOracle& oracle, const PreferenceSynthConfig& config, Rng& rng,
    PreferenceSynthStats* stats = nullptr);

// Preference bit for a scored pair, as used by SynthesizePreferences. Ties
// consume one coin flip, every call with noise_rate > 0 one flip draw.
int LabelPreference(double reward0, double reward1, double noise_rate, Rng& rng,
                    bool* flipped = nullptr, bool* tie = nullptr);

}  // namespace dpalign

#endif  // DPALIGN_SYNTHETIC_H_

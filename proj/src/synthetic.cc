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

#include "dpalign/synthetic.h"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {
namespace {

// Oracle lexicons, and corpus-only sentiment words the oracle ignores.
const std::vector<std::string> kPositive = {"good", "great", "fun", "love", "nice", "best"};
const std::vector<std::string> kNegative = {"bad", "dull", "awful", "boring", "worst", "poor"};
const std::vector<std::string> kPositiveAlt = {"fine", "cool", "superb", "neat", "sweet", "grand"};
const std::vector<std::string> kNegativeAlt = {"meh", "weak", "lame", "flat", "bland", "sad"};

const std::vector<std::string> kSubjects = {"the movie", "the film",   "the plot",
                                            "the cast",  "the story",  "the acting",
                                            "the music", "the ending", "the script"};
const std::vector<std::string> kVerbs = {"was", "is", "felt", "seemed"};
const std::vector<std::string> kAdverbs = {"very", "so", "quite", "really", "rather"};
const std::vector<std::string> kNeutral = {"long", "short", "slow", "loud", "quiet", "old", "new", "odd"};
const std::vector<std::string> kJoins = {" and ", " but ", ". "};

const std::string& Pick(const std::vector<std::string>& v, Rng& rng) {
  return v[rng.UniformInt(v.size())];
}

// First `shared` oracle words followed by alternates, always six words.
std::vector<std::string> CorpusLexicon(const std::vector<std::string>& oracle,
                                       const std::vector<std::string>& alt, int shared) {
  std::vector<std::string> out(oracle.begin(), oracle.begin() + shared);
  out.insert(out.end(), alt.begin(), alt.begin() + (oracle.size() - shared));
  return out;
}

}  // namespace

absl::Status SyntheticOracle::Validate() const {
  for (const std::string& w : positive) {
    if (negative.contains(w)) {
      return absl::InvalidArgumentError("lexicons overlap on '" + w + "'");
    }
  }
  if (!(noise_rate >= 0 && noise_rate < 0.5)) {
    return absl::InvalidArgumentError(
        absl::StrCat("preference noise rate must be in [0, 0.5), got ", noise_rate));
  }
  return absl::OkStatus();
}

SyntheticOracle DefaultOracle(double noise_rate) {
  SyntheticOracle o;
  o.positive.insert(kPositive.begin(), kPositive.end());
  o.negative.insert(kNegative.begin(), kNegative.end());
  o.noise_rate = noise_rate;
  return o;
}

std::vector<std::string> SplitWords(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

double LexiconReward(const SyntheticOracle& oracle, std::string_view text) {
  double score = 0.0;
  for (const std::string& w : SplitWords(text)) {
    if (oracle.positive.contains(w)) score += 1.0;
    if (oracle.negative.contains(w)) score -= 1.0;
  }
  return score;
}

double LexiconReward(const SyntheticOracle& oracle, const TokenSeq& tokens) {
  return LexiconReward(oracle, DecodeBytes(tokens));
}

absl::Status CorpusConfig::Validate() const {
  if (size < 1) return absl::InvalidArgumentError("corpus size must be >= 1");
  if (!(lexicon_overlap >= 0 && lexicon_overlap <= 1)) {
    return absl::InvalidArgumentError("lexicon_overlap must be in [0, 1]");
  }
  if (prompt_words < 1 || prompt_words > 3) {
    return absl::InvalidArgumentError("prompt_words must be in [1, 3]");
  }
  return absl::OkStatus();
}

absl::StatusOr<std::vector<CorpusRecord>> GenerateCorpus(const CorpusConfig& config,
                                                         const SyntheticOracle& oracle, Rng& rng,
                                                         const std::string& id_prefix) {
  RETURN_IF_ERROR(config.Validate());
  RETURN_IF_ERROR(oracle.Validate());
  const int shared = static_cast<int>(std::lround(config.lexicon_overlap * kPositive.size()));
  const std::vector<std::string> pos = CorpusLexicon(kPositive, kPositiveAlt, shared);
  const std::vector<std::string> neg = CorpusLexicon(kNegative, kNegativeAlt, shared);

  // Sentiment of one clause: +1, -1 or 0 (neutral adjective).
  auto adjective = [&](int sentiment) -> const std::string& {
    if (sentiment > 0) return Pick(pos, rng);
    if (sentiment < 0) return Pick(neg, rng);
    return Pick(kNeutral, rng);
  };
  auto clause = [&](int sentiment) {
    // Draws are sequenced explicitly; argument evaluation order is unspecified.
    std::string c = Pick(kSubjects, rng);
    absl::StrAppend(&c, " ", Pick(kVerbs, rng), " ");
    if (rng.Bernoulli(0.5)) absl::StrAppend(&c, Pick(kAdverbs, rng), " ");
    absl::StrAppend(&c, adjective(sentiment));
    return c;
  };
  auto clause_sentiment = [&](int polarity) {
    // Polarity-consistent with probability 0.7, neutral otherwise.
    return rng.Bernoulli(0.7) ? polarity : 0;
  };

  std::vector<CorpusRecord> out;
  out.reserve(config.size);
  for (int64_t i = 0; i < config.size; ++i) {
    const double u = rng.Uniform();
    // 40% positive, 40% negative, 20% mixed.
    const int polarity = u < 0.4 ? 1 : (u < 0.8 ? -1 : 0);
    std::string text;
    if (polarity == 0) {
      const int first = rng.Bernoulli(0.5) ? 1 : -1;
      text = clause(first);
      text += Pick(kJoins, rng);
      text += clause(-first);
    } else if (rng.Bernoulli(0.5)) {
      text = clause(clause_sentiment(polarity));
    } else {
      text = clause(clause_sentiment(polarity));
      text += Pick(kJoins, rng);
      text += clause(clause_sentiment(polarity));
    }
    text += ".";
    out.push_back({absl::StrCat(id_prefix, i), std::move(text)});
  }
  return out;
}

SftExample SplitPromptTarget(const std::string& text, int prompt_words) {
  size_t pos = 0;
  for (int w = 0; w < prompt_words; ++w) {
    const size_t next = text.find(' ', pos);
    if (next == std::string::npos) return {text, ""};
    pos = next + 1;
  }
  return {text.substr(0, pos - 1), text.substr(pos - 1)};
}

absl::StatusOr<std::vector<CorpusRecord>> ParseCorpus(std::string_view contents) {
  std::vector<CorpusRecord> out;
  size_t start = 0, line_no = 0;
  while (start < contents.size()) {
    ++line_no;
    size_t end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(start, end - start);
    start = end + 1;
    const size_t tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0 ||
        line.find('\t', tab + 1) != std::string_view::npos) {
      return absl::InvalidArgumentError(
          absl::StrCat("line ", line_no, ": expected `id \\t text`"));
    }
    auto text = UnescapeField(line.substr(tab + 1));
    if (!text.ok()) {
      return absl::InvalidArgumentError(absl::StrCat("line ", line_no, ": ", text.status().message()));
    }
    out.push_back({std::string(line.substr(0, tab)), *std::move(text)});
  }
  return out;
}

std::string FormatCorpus(const std::vector<CorpusRecord>& records) {
  std::string out;
  for (const CorpusRecord& r : records) absl::StrAppend(&out, r.id, "\t", EscapeField(r.text), "\n");
  return out;
}

int LabelPreference(double reward0, double reward1, double noise_rate, Rng& rng, bool* flipped,
                    bool* tie) {
  int b;
  const bool is_tie = reward0 == reward1;
  if (is_tie) {
    b = rng.Bernoulli(0.5) ? 1 : 0;
  } else {
    b = reward1 > reward0 ? 1 : 0;
  }
  const bool flip = noise_rate > 0 && rng.Bernoulli(noise_rate);
  if (flip) b = 1 - b;
  if (flipped) *flipped = flip;
  if (tie) *tie = is_tie;
  return b;
}

absl::StatusOr<std::vector<PreferenceRecord>> SynthesizePreferences(
    const TinyLM& model, const std::vector<std::string>& prompts, const SyntheticOracle& oracle,
    const PreferenceSynthConfig& config, Rng& rng, PreferenceSynthStats* stats) {
  RETURN_IF_ERROR(oracle.Validate());
  PreferenceSynthStats local;
  PreferenceSynthStats& st = stats ? *stats : local;
  std::vector<PreferenceRecord> out;
  for (const std::string& prompt : prompts) {
    const TokenSeq ptoks = EncodePrompt(prompt);
    ASSIGN_OR_RETURN(Generation g0, Generate(model, ptoks, config.generation, rng));
    const std::string y0 = DecodeBytes(g0.tokens);
    const double r0 = LexiconReward(oracle, y0);
    std::string y1;
    double r1 = 0.0;
    const int attempts = config.ties == TiePolicy::kResample ? 1 + config.max_resamples : 1;
    bool usable = false;
    for (int a = 0; a < attempts; ++a) {
      ASSIGN_OR_RETURN(Generation g1, Generate(model, ptoks, config.generation, rng));
      y1 = DecodeBytes(g1.tokens);
      r1 = LexiconReward(oracle, y1);
      usable = y1 != y0 && !y1.empty() &&
               (config.ties == TiePolicy::kCoin || r1 != r0);
      if (usable) break;
    }
    if (!usable || y0.empty()) {
      ++st.dropped;
      continue;
    }
    bool flipped = false, tie = false;
    const int b = LabelPreference(r0, r1, oracle.noise_rate, rng, &flipped, &tie);
    st.flipped += flipped;
    st.coin_ties += tie;
    ++st.records;
    out.push_back({prompt, y0, y1, b});
  }
  return out;
}

}  // namespace dpalign

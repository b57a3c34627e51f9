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

#ifndef DPALIGN_DATASETS_H_
#define DPALIGN_DATASETS_H_

#include <string>
#include <string_view>
#include <vector>

#include "absl/status/statusor.h"
#include "dpalign/tokenizer.h"

namespace dpalign {

// Text files are UTF-8, one record per line, tab-separated. Fields escape
// backslash, tab, newline, carriage return and other control bytes
// (\\ \t \n \r \xHH) so arbitrary generated bytes survive a round trip.
std::string EscapeField(std::string_view raw);
absl::StatusOr<std::string> UnescapeField(std::string_view escaped);

struct SftExample {
  std::string prompt;
  std::string target;
};

struct PreferenceRecord {
  std::string prompt;
  std::string y0;
  std::string y1;
  // Index of the preferred completion.
  int preferred = 0;

  const std::string& chosen() const { return preferred == 0 ? y0 : y1; }
  const std::string& rejected() const { return preferred == 0 ? y1 : y0; }
};

// `prompt \t target`. Empty targets are rejected.
absl::StatusOr<std::vector<SftExample>> ParseSftDataset(std::string_view contents);
std::string FormatSftDataset(const std::vector<SftExample>& examples);

// `prompt \t y0 \t y1 \t b`, b in {0, 1}. Records with y0 == y1 are rejected.
absl::StatusOr<std::vector<PreferenceRecord>> ParsePreferenceDataset(
    std::string_view contents);
std::string FormatPreferenceDataset(const std::vector<PreferenceRecord>& records);

// One escaped prompt per line.
absl::StatusOr<std::vector<std::string>> ParsePromptList(std::string_view contents);
std::string FormatPromptList(const std::vector<std::string>& prompts);

absl::StatusOr<std::vector<SftExample>> LoadSftDataset(const std::string& path);
absl::StatusOr<std::vector<PreferenceRecord>> LoadPreferenceDataset(const std::string& path);
absl::StatusOr<std::vector<std::string>> LoadPromptList(const std::string& path);

// Token views used by the stages: the prompt is BOS + bytes, SFT targets end
// with EOS.
TokenSeq SftTargetTokens(const SftExample& example);

}  // namespace dpalign

#endif  // DPALIGN_DATASETS_H_

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

#ifndef DPALIGN_TOKENIZER_H_
#define DPALIGN_TOKENIZER_H_

#include <string>
#include <string_view>
#include <vector>

namespace dpalign {

using TokenSeq = std::vector<int>;

// Byte-level vocabulary: ids 0..255 are bytes, followed by three specials.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kPadToken = 258;
inline constexpr int kByteVocabSize = 259;

TokenSeq EncodeBytes(std::string_view text);
// Prompts start with BOS so the first response token has a context row.
TokenSeq EncodePrompt(std::string_view text);
// Drops special tokens.
std::string DecodeBytes(const TokenSeq& tokens);

}  // namespace dpalign

#endif  // DPALIGN_TOKENIZER_H_

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

#include "dpalign/tokenizer.h"

namespace dpalign {

TokenSeq EncodeBytes(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

TokenSeq EncodePrompt(std::string_view text) {
  TokenSeq out = {kBosToken};
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string DecodeBytes(const TokenSeq& tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

}  // namespace dpalign

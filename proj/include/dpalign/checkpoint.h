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

#ifndef DPALIGN_CHECKPOINT_H_
#define DPALIGN_CHECKPOINT_H_

#include <string>

#include "absl/status/statusor.h"
#include "dpalign/tiny_lm.h"

namespace dpalign {

// Binary layout (all integers little-endian):
//   "DPAL" | u32 version
//   u32 entry count, then per entry: u32 key length, key, u32 value length,
//     value   (model config fields, then "meta."-prefixed metadata)
//   u32 array count, then per array: u32 name length, name, u8 dtype (0=f32),
//     u32 rank, rank x u64 dims, float32 payload
inline constexpr uint32_t kCheckpointVersion = 1;

std::string SerializeCheckpoint(const TinyLM& model);
absl::StatusOr<TinyLM> ParseCheckpoint(const std::string& bytes);

absl::Status SaveCheckpoint(const TinyLM& model, const std::string& path);
absl::StatusOr<TinyLM> LoadCheckpoint(const std::string& path);

// Whole-file helpers shared by the other persistence code.
absl::StatusOr<std::string> ReadFile(const std::string& path);
absl::Status WriteFile(const std::string& path, const std::string& contents);

}  // namespace dpalign

#endif  // DPALIGN_CHECKPOINT_H_

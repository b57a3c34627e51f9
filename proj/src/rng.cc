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

#include "dpalign/rng.h"

#include <cmath>

namespace dpalign {
namespace {

uint64_t SplitMix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t Fnv1a64(std::string_view bytes, uint64_t seed) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng::Rng(uint64_t seed) : seed_(seed), engine_(SplitMix64(seed)) {}

Rng Rng::Substream(uint64_t root_seed, std::string_view name) {
  return Rng(SplitMix64(root_seed ^ Fnv1a64(name)));
}

Rng Rng::Fork(std::string_view name) const { return Substream(seed_, name); }

uint64_t Rng::NextU64() {
  ++draws_;
  return engine_();
}

double Rng::Uniform() {
  return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
}

double Rng::Normal() {
  CountingEngine counting{&engine_, &draws_};
  return normal_(counting);
}

bool Rng::Bernoulli(double p) { return Uniform() < p; }

uint64_t Rng::UniformInt(uint64_t n) {
  CountingEngine counting{&engine_, &draws_};
  return std::uniform_int_distribution<uint64_t>(0, n - 1)(counting);
}

}  // namespace dpalign

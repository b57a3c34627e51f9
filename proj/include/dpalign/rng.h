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

#ifndef DPALIGN_RNG_H_
#define DPALIGN_RNG_H_

#include <cstdint>
#include <random>
#include <string_view>

namespace dpalign {

// 64-bit FNV-1a.
uint64_t Fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL);

// Deterministic pseudo-random source. Every draw from the underlying engine is
// counted so tests can verify that noise is never reused.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  // Independent stream derived from a root seed and a stream name, e.g.
  // Rng::Substream(seed, "noise").
  static Rng Substream(uint64_t root_seed, std::string_view name);

  // Child stream derived from this stream's seed (does not consume draws).
  Rng Fork(std::string_view name) const;

  uint64_t NextU64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double Uniform();
  double Normal();
  bool Bernoulli(double p);
  // Uniform integer in [0, n).
  uint64_t UniformInt(uint64_t n);

  uint64_t seed() const { return seed_; }
  uint64_t draws() const { return draws_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
  uint64_t draws_ = 0;

  struct CountingEngine {
    using result_type = std::mt19937_64::result_type;
    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() {
      ++*draws;
      return (*engine)();
    }
    std::mt19937_64* engine;
    uint64_t* draws;
  };
};

}  // namespace dpalign

#endif  // DPALIGN_RNG_H_

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

#ifndef DPALIGN_DP_OPTIM_H_
#define DPALIGN_DP_OPTIM_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "dpalign/parameters.h"
#include "dpalign/rng.h"

namespace dpalign {

enum class PrivacyMode { kDp, kNonprivate };

absl::StatusOr<PrivacyMode> ParsePrivacyMode(const std::string& s);
const char* PrivacyModeName(PrivacyMode mode);

struct DPConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 0.0;
  double sampling_prob = 1.0;
  int64_t expected_steps = 1;
  PrivacyMode mode = PrivacyMode::kNonprivate;
  // Runs the dp code path with sigma = 0. Such a run carries no privacy
  // guarantee; it exists to compare trajectories against nonprivate mode.
  bool diagnostic_zero_noise = false;

  // dp mode requires noise_multiplier > 0 unless diagnostic_zero_noise.
  absl::Status Validate() const;
};

// Each index of [0, n) is kept independently with probability q, in
// increasing order.
absl::StatusOr<std::vector<int64_t>> PoissonSample(int64_t n, double q,
                                                   Rng& rng);

struct ClipStats {
  std::vector<double> pre_clip_norms;
  int64_t num_clipped = 0;

  double fraction_clipped() const {
    return pre_clip_norms.empty()
               ? 0.0
               : static_cast<double>(num_clipped) / pre_clip_norms.size();
  }
};

// g <- g / max(1, |g| / clip_norm) for every gradient, norm over the whole
// flat vector. A non-finite gradient is an error naming sample_ids[i] (or i
// when ids are not given).
absl::StatusOr<ClipStats> ClipInPlace(std::vector<FlatGrad>& grads,
                                      double clip_norm,
                                      std::span<const int64_t> sample_ids = {});

// (sum_i g_i + N(0, sigma^2 C^2 I)) / B. Returns nullopt for an empty batch,
// in which case no noise is drawn. With sigma = 0 nothing is drawn either.
std::optional<FlatGrad> NoisyAggregate(std::span<const FlatGrad> clipped,
                                       int64_t dim, double clip_norm,
                                       double noise_multiplier, Rng& rng);

enum class LrSchedule { kConstant, kCosine, kLinear };

absl::StatusOr<LrSchedule> ParseLrSchedule(const std::string& s);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule = LrSchedule::kConstant;
  // Horizon of the cosine and linear schedules; both decay to zero at it.
  int64_t total_steps = 1;
  // Keep parameters representable in float32 after each step.
  bool round_to_float = true;
};

// Decoupled weight decay Adam over one TrainableSet.
class AdamW {
 public:
  AdamW(AdamWConfig config, TrainableSet trainable);

  // Learning rate used by the next step.
  double CurrentLr() const;

  absl::Status Step(ParameterSet& params, std::span<const double> grad);
  // Advances the step counter (and schedule) without touching anything else.
  void SkipStep() { ++step_; }

  int64_t step() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const TrainableSet& trainable() const { return trainable_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }

 private:
  AdamWConfig config_;
  TrainableSet trainable_;
  std::vector<double> m_;
  std::vector<double> v_;
  int64_t step_ = 0;
  // Adam bias correction counts updates, not skipped steps.
  int64_t updates_ = 0;
};

// Upper bucket edges of the pre-clip norm histogram, as multiples of C. The
// last bucket is open.
inline constexpr double kNormHistogramEdges[] = {0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct StepTelemetry {
  int64_t step = 0;
  int64_t batch_size = 0;
  bool skipped = false;
  double lr = 0.0;
  double mean_loss = 0.0;
  double fraction_clipped = 0.0;
  std::vector<int64_t> norm_histogram;
};

// One optimizer step on `batch`.
//   dp: per-sample gradients, clip, noise, AdamW. Empty batch skips.
//   nonprivate: plain mean-loss gradient and AdamW, no clipping or noise.
absl::StatusOr<StepTelemetry> TrainStep(const DPConfig& dp, AdamW& optimizer,
                                        ParameterSet& params,
                                        std::span<const int64_t> batch,
                                        const ExampleLoss& loss,
                                        Rng& noise_rng, int num_threads = 1);

}  // namespace dpalign

#endif  // DPALIGN_DP_OPTIM_H_

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

#include "dpalign/dp_optim.h"

#include <cmath>
#include <numbers>

#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {

absl::StatusOr<PrivacyMode> ParsePrivacyMode(const std::string& s) {
  if (s == "dp") return PrivacyMode::kDp;
  if (s == "nonprivate") return PrivacyMode::kNonprivate;
  return absl::InvalidArgumentError("mode must be dp or nonprivate, got '" + s + "'");
}

const char* PrivacyModeName(PrivacyMode mode) {
  return mode == PrivacyMode::kDp ? "dp" : "nonprivate";
}

absl::Status DPConfig::Validate() const {
  if (!(clip_norm > 0)) {
    return absl::InvalidArgumentError(absl::StrCat("clip_norm must be > 0, got ", clip_norm));
  }
  if (!(noise_multiplier >= 0)) {
    return absl::InvalidArgumentError(
        absl::StrCat("noise_multiplier must be >= 0, got ", noise_multiplier));
  }
  if (!(sampling_prob > 0 && sampling_prob <= 1)) {
    return absl::InvalidArgumentError(
        absl::StrCat("sampling_prob must be in (0, 1], got ", sampling_prob));
  }
  if (expected_steps < 1) {
    return absl::InvalidArgumentError(
        absl::StrCat("expected_steps must be >= 1, got ", expected_steps));
  }
  if (mode == PrivacyMode::kDp && noise_multiplier == 0 && !diagnostic_zero_noise) {
    return absl::InvalidArgumentError(
        "dp mode requires noise_multiplier > 0; sigma = 0 gives no privacy");
  }
  return absl::OkStatus();
}

absl::StatusOr<std::vector<int64_t>> PoissonSample(int64_t n, double q, Rng& rng) {
  if (n < 1) return absl::InvalidArgumentError(absl::StrCat("dataset size must be >= 1, got ", n));
  if (!(q >= 0 && q <= 1)) {
    return absl::InvalidArgumentError(absl::StrCat("sampling probability must be in [0, 1], got ", q));
  }
  std::vector<int64_t> out;
  for (int64_t i = 0; i < n; ++i) {
    if (rng.Bernoulli(q)) out.push_back(i);
  }
  return out;
}

absl::StatusOr<ClipStats> ClipInPlace(std::vector<FlatGrad>& grads, double clip_norm,
                                      std::span<const int64_t> sample_ids) {
  if (!(clip_norm > 0)) return absl::InvalidArgumentError("clip_norm must be > 0");
  ClipStats stats;
  stats.pre_clip_norms.reserve(grads.size());
  for (size_t i = 0; i < grads.size(); ++i) {
    const double norm = L2Norm(grads[i]);
    if (!std::isfinite(norm)) {
      const int64_t id = sample_ids.empty() ? static_cast<int64_t>(i) : sample_ids[i];
      return absl::InvalidArgumentError(
          absl::StrCat("non-finite gradient for sample ", id));
    }
    stats.pre_clip_norms.push_back(norm);
    if (norm > clip_norm) {
      ++stats.num_clipped;
      double scale = clip_norm / norm;
      const FlatGrad raw = grads[i];
      // Rounding can leave the scaled norm an ulp above clip_norm.
      while (true) {
        for (size_t j = 0; j < raw.size(); ++j) grads[i][j] = raw[j] * scale;
        if (L2Norm(grads[i]) <= clip_norm) break;
        scale = std::nextafter(scale, 0.0);
      }
    }
  }
  return stats;
}

std::optional<FlatGrad> NoisyAggregate(std::span<const FlatGrad> clipped, int64_t dim,
                                       double clip_norm, double noise_multiplier, Rng& rng) {
  if (clipped.empty()) return std::nullopt;
  FlatGrad sum(dim, 0.0);
  for (const FlatGrad& g : clipped) {
    for (int64_t j = 0; j < dim; ++j) sum[j] += g[j];
  }
  const double noise_std = noise_multiplier * clip_norm;
  if (noise_std > 0) {
    for (int64_t j = 0; j < dim; ++j) sum[j] += noise_std * rng.Normal();
  }
  const double inv_b = 1.0 / static_cast<double>(clipped.size());
  for (double& x : sum) x *= inv_b;
  return sum;
}

absl::StatusOr<LrSchedule> ParseLrSchedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  if (s == "linear") return LrSchedule::kLinear;
  return absl::InvalidArgumentError("lr schedule must be constant, cosine or linear, got '" + s + "'");
}

AdamW::AdamW(AdamWConfig config, TrainableSet trainable)
    : config_(config),
      trainable_(std::move(trainable)),
      m_(trainable_.total(), 0.0),
      v_(trainable_.total(), 0.0) {}

double AdamW::CurrentLr() const {
  const double horizon = std::max<int64_t>(config_.total_steps, 1);
  const double frac = std::min(1.0, static_cast<double>(step_) / horizon);
  switch (config_.schedule) {
    case LrSchedule::kConstant:
      return config_.lr;
    case LrSchedule::kCosine:
      return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    case LrSchedule::kLinear:
      return config_.lr * (1.0 - frac);
  }
  return config_.lr;
}

absl::Status AdamW::Step(ParameterSet& params, std::span<const double> grad) {
  if (static_cast<int64_t>(grad.size()) != trainable_.total()) {
    return absl::InvalidArgumentError(absl::StrCat("AdamW: gradient has ", grad.size(),
                                                   " entries, expected ", trainable_.total()));
  }
  const double lr = CurrentLr();
  ++step_;
  ++updates_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(updates_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(updates_));
  for (size_t i = 0; i < trainable_.names().size(); ++i) {
    Tensor& p = params.GetMutable(trainable_.names()[i]);
    const int64_t off = trainable_.offset(i);
    if (p.size() != trainable_.length(i)) {
      return absl::InvalidArgumentError("AdamW: parameter " + trainable_.names()[i] +
                                        " changed size");
    }
    std::span<double> data = p.data();
    for (int64_t j = 0; j < p.size(); ++j) {
      const double g = grad[off + j];
      double& m = m_[off + j];
      double& v = v_[off + j];
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g * g;
      const double m_hat = m / c1;
      const double v_hat = v / c2;
      data[j] -= lr * (m_hat / (std::sqrt(v_hat) + config_.epsilon) +
                       config_.weight_decay * data[j]);
    }
  }
  if (config_.round_to_float) params.RoundToFloat();
  return absl::OkStatus();
}

namespace {

std::vector<int64_t> NormHistogram(const std::vector<double>& norms, double clip_norm) {
  constexpr size_t kEdges = std::size(kNormHistogramEdges);
  std::vector<int64_t> hist(kEdges + 1, 0);
  for (double n : norms) {
    size_t b = 0;
    while (b < kEdges && n > kNormHistogramEdges[b] * clip_norm) ++b;
    ++hist[b];
  }
  return hist;
}

}  // namespace

absl::StatusOr<StepTelemetry> TrainStep(const DPConfig& dp, AdamW& optimizer,
                                        ParameterSet& params, std::span<const int64_t> batch,
                                        const ExampleLoss& loss, Rng& noise_rng,
                                        int num_threads) {
  RETURN_IF_ERROR(dp.Validate());
  StepTelemetry t;
  t.step = optimizer.step();
  t.lr = optimizer.CurrentLr();
  t.batch_size = static_cast<int64_t>(batch.size());
  t.norm_histogram.assign(std::size(kNormHistogramEdges) + 1, 0);
  if (batch.empty()) {
    optimizer.SkipStep();
    t.skipped = true;
    return t;
  }
  const TrainableSet& trainable = optimizer.trainable();
  if (dp.mode == PrivacyMode::kNonprivate) {
    ASSIGN_OR_RETURN(FlatGrad grad,
                     MeanLossGradient(params, trainable, batch, loss, &t.mean_loss));
    RETURN_IF_ERROR(optimizer.Step(params, grad));
    return t;
  }
  std::vector<double> losses;
  ASSIGN_OR_RETURN(std::vector<FlatGrad> grads,
                   PerSampleGradients(params, trainable, batch, loss, num_threads, &losses));
  ASSIGN_OR_RETURN(ClipStats stats, ClipInPlace(grads, dp.clip_norm, batch));
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!(L2Norm(grads[i]) <= dp.clip_norm)) {
      return absl::InternalError(
          absl::StrCat("clipped gradient of sample ", batch[i], " exceeds clip_norm"));
    }
  }
  std::optional<FlatGrad> update = NoisyAggregate(grads, trainable.total(), dp.clip_norm,
                                                  dp.noise_multiplier, noise_rng);
  RETURN_IF_ERROR(optimizer.Step(params, *update));
  double total = 0.0;
  for (double l : losses) total += l;
  t.mean_loss = total / losses.size();
  t.fraction_clipped = stats.fraction_clipped();
  t.norm_histogram = NormHistogram(stats.pre_clip_norms, dp.clip_norm);
  return t;
}

}  // namespace dpalign

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

#include "dpalign/accountant.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "absl/strings/str_cat.h"
#include "dpalign/rng.h"
#include "dpalign/status_macros.h"

namespace dpalign {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double LogAdd(double a, double b) {
  const double hi = std::max(a, b), lo = std::min(a, b);
  if (hi == -kInf) return -kInf;
  return hi + std::log1p(std::exp(lo - hi));
}

// log(e^a - e^b), a >= b.
double LogSub(double a, double b) {
  if (b == -kInf) return a;
  if (a <= b) return -kInf;
  return a + std::log1p(-std::exp(b - a));
}

double LogErfc(double x) {
  if (x < 25.0) return std::log(std::erfc(x));
  // Asymptotic series; erfc underflows past ~26.
  const double x2 = x * x;
  return -x2 - std::log(x) - 0.5 * std::log(M_PI) +
         std::log1p(-0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2));
}

double LogBinomial(int64_t n, int64_t k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log A_alpha for integer alpha:
// sum_k C(a,k) q^k (1-q)^(a-k) exp((k^2 - k) / (2 sigma^2)).
double LogAInteger(double q, double sigma, int64_t alpha) {
  double acc = -kInf;
  const double lq = std::log(q), l1q = std::log1p(-q);
  for (int64_t k = 0; k <= alpha; ++k) {
    const double term = LogBinomial(alpha, k) + k * lq + (alpha - k) * l1q +
                        (static_cast<double>(k) * k - k) / (2 * sigma * sigma);
    acc = LogAdd(acc, term);
  }
  return acc;
}

// log A_alpha for fractional alpha by splitting the integral at z0 and
// expanding each side in a generalized binomial series.
double LogAFractional(double q, double sigma, double alpha) {
  double log_a0 = -kInf, log_a1 = -kInf;
  const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
  const double lq = std::log(q), l1q = std::log1p(-q);
  double log_abs_coef = 0.0;
  bool coef_positive = true;
  for (int64_t i = 0;; ++i) {
    if (i > 0) {
      const double factor = (alpha - i + 1) / static_cast<double>(i);
      log_abs_coef += std::log(std::abs(factor));
      if (factor < 0) coef_positive = !coef_positive;
    }
    const double j = alpha - i;
    const double log_t0 = log_abs_coef + i * lq + j * l1q;
    const double log_t1 = log_abs_coef + j * lq + i * l1q;
    const double log_e0 = std::log(0.5) + LogErfc((i - z0) / (M_SQRT2 * sigma));
    const double log_e1 = std::log(0.5) + LogErfc((z0 - j) / (M_SQRT2 * sigma));
    const double log_s0 = log_t0 + (static_cast<double>(i) * i - i) / (2 * sigma * sigma) + log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2 * sigma * sigma) + log_e1;
    if (coef_positive) {
      log_a0 = LogAdd(log_a0, log_s0);
      log_a1 = LogAdd(log_a1, log_s1);
    } else {
      log_a0 = LogSub(log_a0, log_s0);
      log_a1 = LogSub(log_a1, log_s1);
    }
    if (i > alpha && std::max(log_s0, log_s1) < -30) break;
    if (i > 100000) break;
  }
  return LogAdd(log_a0, log_a1);
}

double SingleStepRdp(double q, double sigma, double alpha) {
  if (q == 1.0) return alpha / (2 * sigma * sigma);
  const double rounded = std::round(alpha);
  const double log_a = (alpha == rounded)
                           ? LogAInteger(q, sigma, static_cast<int64_t>(rounded))
                           : LogAFractional(q, sigma, alpha);
  return std::max(0.0, log_a / (alpha - 1));
}

}  // namespace

absl::Status MechanismParams::Validate() const {
  if (!(noise_multiplier > 0) || !std::isfinite(noise_multiplier)) {
    return absl::InvalidArgumentError(absl::StrCat(
        "noise_multiplier must be > 0 (sigma = 0 has infinite privacy loss), got ",
        noise_multiplier));
  }
  if (!(sampling_prob > 0 && sampling_prob <= 1)) {
    return absl::InvalidArgumentError(
        absl::StrCat("sampling_prob must be in (0, 1], got ", sampling_prob));
  }
  if (steps < 1) return absl::InvalidArgumentError(absl::StrCat("steps must be >= 1, got ", steps));
  return absl::OkStatus();
}

absl::Status PrivacyBudget::Validate() const {
  if (!(epsilon > 0)) return absl::InvalidArgumentError(absl::StrCat("epsilon must be > 0, got ", epsilon));
  if (!(delta > 0 && delta < 1)) {
    return absl::InvalidArgumentError(absl::StrCat("delta must be in (0, 1), got ", delta));
  }
  return absl::OkStatus();
}

const std::vector<double>& DefaultRdpOrders() {
  static const std::vector<double> orders = [] {
    std::vector<double> o;
    const int n = 60;
    const double lo = std::log(1.25), hi = std::log(1024.0);
    for (int i = 0; i < n; ++i) o.push_back(std::exp(lo + (hi - lo) * i / (n - 1)));
    o.front() = 1.25;
    o.back() = 1024.0;
    for (int k = 2; k <= 32; ++k) o.push_back(k);
    std::sort(o.begin(), o.end());
    o.erase(std::unique(o.begin(), o.end()), o.end());
    return o;
  }();
  return orders;
}

absl::StatusOr<RdpCurve> ComputeRdp(const MechanismParams& mechanism, std::span<const double> orders) {
  RETURN_IF_ERROR(mechanism.Validate());
  RdpCurve curve;
  for (double a : orders) {
    if (!(a > 1)) return absl::InvalidArgumentError(absl::StrCat("RDP order must be > 1, got ", a));
    curve.orders.push_back(a);
    curve.values.push_back(mechanism.steps * SingleStepRdp(mechanism.sampling_prob, mechanism.noise_multiplier, a));
  }
  return curve;
}

absl::StatusOr<RdpCurve> ComputeRdp(const MechanismParams& mechanism) {
  return ComputeRdp(mechanism, DefaultRdpOrders());
}

absl::StatusOr<EpsilonResult> RdpToEpsilon(const RdpCurve& curve, double delta) {
  if (!(delta > 0 && delta < 1)) {
    return absl::InvalidArgumentError(absl::StrCat("delta must be in (0, 1), got ", delta));
  }
  if (curve.orders.empty() || curve.orders.size() != curve.values.size()) {
    return absl::InvalidArgumentError("RDP curve is empty or malformed");
  }
  EpsilonResult best{kInf, 0.0};
  for (size_t i = 0; i < curve.orders.size(); ++i) {
    const double a = curve.orders[i];
    const double eps = curve.values[i] - (std::log(delta) + std::log(a)) / (a - 1) +
                       std::log((a - 1) / a);
    if (std::isfinite(eps) && eps < best.epsilon) best = {eps, a};
  }
  if (!std::isfinite(best.epsilon)) {
    return absl::InternalError("no order gives a finite epsilon");
  }
  best.epsilon = std::max(0.0, best.epsilon);
  return best;
}

absl::StatusOr<EpsilonResult> ComputeEpsilon(const MechanismParams& mechanism, double delta) {
  ASSIGN_OR_RETURN(RdpCurve curve, ComputeRdp(mechanism));
  return RdpToEpsilon(curve, delta);
}

absl::StatusOr<double> CalibrateSigma(const PrivacyBudget& target, double q, int64_t steps,
                                      double sigma_max) {
  RETURN_IF_ERROR(target.Validate());
  if (!(sigma_max > 0)) return absl::InvalidArgumentError("sigma_max must be > 0");
  MechanismParams probe{sigma_max, q, steps};
  RETURN_IF_ERROR(probe.Validate());
  auto eps_at = [&](double sigma) -> absl::StatusOr<double> {
    ASSIGN_OR_RETURN(EpsilonResult r,
                     ComputeEpsilon(MechanismParams{sigma, q, steps}, target.delta));
    return r.epsilon;
  };
  ASSIGN_OR_RETURN(double eps_max, eps_at(sigma_max));
  if (eps_max > target.epsilon) {
    return absl::OutOfRangeError(absl::StrCat(
        "target epsilon ", target.epsilon, " is infeasible: sigma_max = ", sigma_max,
        " still gives epsilon = ", eps_max));
  }
  double hi = sigma_max, lo = sigma_max;
  // Walk down until the bracket is valid: eps(lo) > target >= eps(hi).
  while (true) {
    lo = hi / 2;
    if (lo < 1e-6) return absl::InternalError("sigma calibration failed to bracket");
    ASSIGN_OR_RETURN(double e, eps_at(lo));
    if (e > target.epsilon) break;
    hi = lo;
  }
  while ((hi - lo) > 1e-3 * hi) {
    const double mid = 0.5 * (lo + hi);
    ASSIGN_OR_RETURN(double e, eps_at(mid));
    if (e > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

absl::StatusOr<DisjointnessCertificate> CertifyDisjoint(
    const std::vector<std::vector<std::string>>& partition_ids) {
  std::map<std::string, size_t> owner;
  uint64_t fp = Fnv1a64("partitions");
  for (size_t p = 0; p < partition_ids.size(); ++p) {
    std::vector<std::string> sorted = partition_ids[p];
    std::sort(sorted.begin(), sorted.end());
    for (const std::string& id : sorted) {
      auto [it, inserted] = owner.emplace(id, p);
      if (!inserted) {
        return absl::FailedPreconditionError(absl::StrCat(
            "partitions are not disjoint: example '", id, "' is in partition ", it->second,
            " and partition ", p));
      }
      fp = Fnv1a64(id, fp);
      fp = Fnv1a64(std::string_view("\n", 1), fp);
    }
    fp = Fnv1a64("|", fp);
  }
  return DisjointnessCertificate(static_cast<int>(partition_ids.size()), fp);
}

absl::StatusOr<PrivacyBudget> ComposeParallel(std::span<const PrivacyBudget> stages,
                                              const DisjointnessCertificate* certificate) {
  if (certificate == nullptr) {
    return absl::FailedPreconditionError(
        "parallel composition needs a disjointness certificate for the stage partitions");
  }
  // No stage touched private data.
  if (stages.empty()) return PrivacyBudget{0.0, 0.0};
  if (static_cast<int>(stages.size()) > certificate->num_partitions()) {
    return absl::FailedPreconditionError(absl::StrCat(
        stages.size(), " stages but the certificate covers only ",
        certificate->num_partitions(), " partitions"));
  }
  PrivacyBudget out{0.0, 0.0};
  for (const PrivacyBudget& b : stages) {
    if (!(b.epsilon >= 0) || !(b.delta >= 0 && b.delta < 1)) {
      return absl::InvalidArgumentError(
          absl::StrCat("invalid stage budget (", b.epsilon, ", ", b.delta, ")"));
    }
    out.epsilon = std::max(out.epsilon, b.epsilon);
    out.delta = std::max(out.delta, b.delta);
  }
  return out;
}

}  // namespace dpalign

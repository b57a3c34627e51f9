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

#ifndef DPALIGN_ACCOUNTANT_H_
#define DPALIGN_ACCOUNTANT_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"

namespace dpalign {

// T compositions of the Poisson-subsampled Gaussian mechanism with noise
// multiplier sigma and sampling probability q.
struct MechanismParams {
  double noise_multiplier = 1.0;
  double sampling_prob = 1.0;
  int64_t steps = 1;

  absl::Status Validate() const;
};

struct PrivacyBudget {
  double epsilon = 0.0;
  double delta = 0.0;

  absl::Status Validate() const;
};

// 60 log-spaced orders in [1.25, 1024] merged with the integers 2..32,
// sorted and deduplicated.
const std::vector<double>& DefaultRdpOrders();

struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> values;
};

// Renyi DP of the composed mechanism at every order (> 1). Integer orders use
// the exact binomial expansion, fractional ones the two-tailed series.
absl::StatusOr<RdpCurve> ComputeRdp(const MechanismParams& mechanism,
                                    std::span<const double> orders);
absl::StatusOr<RdpCurve> ComputeRdp(const MechanismParams& mechanism);

struct EpsilonResult {
  double epsilon = 0.0;
  // Order at which the minimum is attained.
  double order = 0.0;
};

// eps = min over orders of rdp - (log delta + log a) / (a - 1) + log((a-1)/a).
// Never larger than the classical rdp + log(1/delta) / (a - 1).
absl::StatusOr<EpsilonResult> RdpToEpsilon(const RdpCurve& curve, double delta);

absl::StatusOr<EpsilonResult> ComputeEpsilon(const MechanismParams& mechanism,
                                             double delta);

inline constexpr double kDefaultSigmaMax = 100.0;

// Smallest sigma (to 1e-3 relative width) whose epsilon does not exceed the
// target. The result is the upper end of the final bracket, so its epsilon is
// always <= target.epsilon. OutOfRange if even sigma_max is not enough.
absl::StatusOr<double> CalibrateSigma(const PrivacyBudget& target, double q,
                                      int64_t steps,
                                      double sigma_max = kDefaultSigmaMax);

// Proof that a set of data partitions share no example. Only CertifyDisjoint
// can create one.
class DisjointnessCertificate {
 public:
  int num_partitions() const { return num_partitions_; }
  // FNV-1a over the sorted ids of every partition, in partition order.
  uint64_t fingerprint() const { return fingerprint_; }

 private:
  friend absl::StatusOr<DisjointnessCertificate> CertifyDisjoint(
      const std::vector<std::vector<std::string>>& partition_ids);
  DisjointnessCertificate(int n, uint64_t fp)
      : num_partitions_(n), fingerprint_(fp) {}

  int num_partitions_;
  uint64_t fingerprint_;
};

// FailedPrecondition naming the first id found in two partitions.
absl::StatusOr<DisjointnessCertificate> CertifyDisjoint(
    const std::vector<std::vector<std::string>>& partition_ids);

// (max eps_i, max delta_i), or (0, 0) for no stages. Refuses without a
// certificate covering at least as many partitions as there are stages.
absl::StatusOr<PrivacyBudget> ComposeParallel(
    std::span<const PrivacyBudget> stages,
    const DisjointnessCertificate* certificate);

}  // namespace dpalign

#endif  // DPALIGN_ACCOUNTANT_H_

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

#ifndef DPALIGN_PARAMETERS_H_
#define DPALIGN_PARAMETERS_H_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <map>
#include "absl/status/statusor.h"
#include "dpalign/tape.h"
#include "dpalign/tensor.h"

namespace dpalign {

// Gradient of all trainable parameters flattened in TrainableSet order.
using FlatGrad = std::vector<double>;

// Ordered, named collection of parameter tensors.
class ParameterSet {
 public:
  void Add(std::string name, Tensor value);
  bool Contains(std::string_view name) const;
  const Tensor& Get(std::string_view name) const;
  Tensor& GetMutable(std::string_view name);

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }
  int64_t TotalElements() const;

  // Rounds every value to the nearest float32 so in-memory parameters match
  // their persisted form exactly.
  void RoundToFloat();
  bool AllFinite() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, size_t, std::less<>> index_;
};

// Subset of a ParameterSet that receives gradients, with flat offsets.
class TrainableSet {
 public:
  TrainableSet() = default;
  static absl::StatusOr<TrainableSet> Create(const ParameterSet& params,
                                             std::vector<std::string> names);

  const std::vector<std::string>& names() const { return names_; }
  bool Contains(std::string_view name) const { return index_.contains(name); }
  int64_t offset(size_t i) const { return offsets_[i]; }
  int64_t length(size_t i) const { return offsets_[i + 1] - offsets_[i]; }
  int64_t total() const { return offsets_.empty() ? 0 : offsets_.back(); }

 private:
  std::vector<std::string> names_;
  std::vector<int64_t> offsets_;
  std::map<std::string, size_t, std::less<>> index_;
};

// Lazily binds parameters onto a tape: trainable ones as gradient-carrying
// leaves, the rest as constants. Storage is borrowed from the ParameterSet.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParameterSet& params,
              const TrainableSet* trainable);

  Var operator[](std::string_view name) const;
  Tape& tape() const { return *tape_; }

  // Gradients after tape().Backward(), flattened in trainable order.
  FlatGrad Gradients() const;

 private:
  Tape* tape_;
  const ParameterSet* params_;
  const TrainableSet* trainable_;
  mutable std::map<std::string, Var, std::less<>> bound_;
};

// Builds the scalar loss of one example on a fresh tape.
using ExampleLoss =
    std::function<Var(BoundParams& params, int64_t example_index)>;

// One single-example backward pass per entry of `examples`; result[i] is the
// gradient of example examples[i]. Work may be spread over `num_threads`
// threads, results are always returned in input order. If `losses` is given
// it receives each example's loss value.
absl::StatusOr<std::vector<FlatGrad>> PerSampleGradients(
    const ParameterSet& params, const TrainableSet& trainable,
    std::span<const int64_t> examples, const ExampleLoss& loss,
    int num_threads = 1, std::vector<double>* losses = nullptr);

// Gradient of the mean loss over `examples`, built on a single tape.
absl::StatusOr<FlatGrad> MeanLossGradient(const ParameterSet& params,
                                          const TrainableSet& trainable,
                                          std::span<const int64_t> examples,
                                          const ExampleLoss& loss,
                                          double* mean_loss = nullptr);

double L2Norm(std::span<const double> v);

}  // namespace dpalign

#endif  // DPALIGN_PARAMETERS_H_

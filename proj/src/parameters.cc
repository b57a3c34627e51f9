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

#include "dpalign/parameters.h"

#include <cmath>
#include <stdexcept>
#include <thread>

#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {

void ParameterSet::Add(std::string name, Tensor value) {
  if (index_.contains(name)) {
    throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
  }
  index_[name] = names_.size();
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

bool ParameterSet::Contains(std::string_view name) const {
  return index_.contains(name);
}

const Tensor& ParameterSet::Get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("ParameterSet: no parameter " + std::string(name));
  }
  return tensors_[it->second];
}

Tensor& ParameterSet::GetMutable(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).Get(name));
}

int64_t ParameterSet::TotalElements() const {
  int64_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

void ParameterSet::RoundToFloat() {
  for (Tensor& t : tensors_) {
    for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
  }
}

bool ParameterSet::AllFinite() const {
  for (const Tensor& t : tensors_) {
    if (!t.AllFinite()) return false;
  }
  return true;
}

absl::StatusOr<TrainableSet> TrainableSet::Create(
    const ParameterSet& params, std::vector<std::string> names) {
  TrainableSet set;
  set.offsets_.push_back(0);
  for (std::string& name : names) {
    if (!params.Contains(name)) {
      return absl::InvalidArgumentError(
          absl::StrCat("trainable parameter '", name, "' does not exist"));
    }
    if (set.index_.contains(name)) {
      return absl::InvalidArgumentError(
          absl::StrCat("trainable parameter '", name, "' listed twice"));
    }
    set.index_[name] = set.names_.size();
    set.offsets_.push_back(set.offsets_.back() + params.Get(name).size());
    set.names_.push_back(std::move(name));
  }
  return set;
}

BoundParams::BoundParams(Tape& tape, const ParameterSet& params,
                         const TrainableSet* trainable)
    : tape_(&tape), params_(&params), trainable_(trainable) {}

Var BoundParams::operator[](std::string_view name) const {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  if (!params_->Contains(name)) {
    return tape_->Fail(absl::NotFoundError("no parameter " + std::string(name)));
  }
  const Tensor* value = &params_->Get(name);
  Var v = (trainable_ != nullptr && trainable_->Contains(name))
              ? tape_->Parameter(value)
              : tape_->ConstantRef(value);
  bound_.emplace(std::string(name), v);
  return v;
}

FlatGrad BoundParams::Gradients() const {
  FlatGrad g(trainable_ == nullptr ? 0 : trainable_->total(), 0.0);
  if (trainable_ == nullptr) return g;
  for (size_t i = 0; i < trainable_->names().size(); ++i) {
    auto it = bound_.find(trainable_->names()[i]);
    if (it == bound_.end()) continue;
    const auto& grad = tape_->grad_of(it->second.id);
    if (grad.empty()) continue;
    std::copy(grad.begin(), grad.end(), g.begin() + trainable_->offset(i));
  }
  return g;
}

namespace {

absl::Status SingleExample(const ParameterSet& params,
                           const TrainableSet& trainable, int64_t example,
                           const ExampleLoss& loss, FlatGrad* grad,
                           double* loss_value) {
  Tape tape;
  BoundParams bound(tape, params, &trainable);
  Var l = loss(bound, example);
  RETURN_IF_ERROR(tape.status());
  RETURN_IF_ERROR(tape.Backward(l));
  *grad = bound.Gradients();
  *loss_value = l.value().item();
  return absl::OkStatus();
}

}  // namespace

absl::StatusOr<std::vector<FlatGrad>> PerSampleGradients(
    const ParameterSet& params, const TrainableSet& trainable,
    std::span<const int64_t> examples, const ExampleLoss& loss,
    int num_threads, std::vector<double>* losses) {
  const size_t n = examples.size();
  std::vector<FlatGrad> grads(n);
  std::vector<double> loss_values(n, 0.0);
  std::vector<absl::Status> statuses(n);
  auto work = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      statuses[i] = SingleExample(params, trainable, examples[i], loss,
                                  &grads[i], &loss_values[i]);
    }
  };
  const size_t threads =
      std::min<size_t>(std::max(1, num_threads), std::max<size_t>(n, 1));
  if (threads <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const size_t chunk = (n + threads - 1) / threads;
    for (size_t t = 0; t < threads; ++t) {
      const size_t begin = t * chunk, end = std::min(n, begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  for (const absl::Status& s : statuses) RETURN_IF_ERROR(s);
  if (losses != nullptr) *losses = std::move(loss_values);
  return grads;
}

absl::StatusOr<FlatGrad> MeanLossGradient(const ParameterSet& params,
                                          const TrainableSet& trainable,
                                          std::span<const int64_t> examples,
                                          const ExampleLoss& loss,
                                          double* mean_loss) {
  if (examples.empty()) {
    return absl::InvalidArgumentError("MeanLossGradient: empty batch");
  }
  Tape tape;
  BoundParams bound(tape, params, &trainable);
  std::vector<Var> terms;
  terms.reserve(examples.size());
  for (int64_t e : examples) terms.push_back(Reshape(loss(bound, e), {1, 1}));
  Var total = Scale(Sum(ConcatCols(terms)),
                    1.0 / static_cast<double>(examples.size()));
  RETURN_IF_ERROR(tape.status());
  RETURN_IF_ERROR(tape.Backward(total));
  if (mean_loss != nullptr) *mean_loss = total.value().item();
  return bound.Gradients();
}

double L2Norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace dpalign

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

#include "dpalign/tensor.h"

#include <cmath>
#include <stdexcept>

#include "absl/strings/str_join.h"

namespace dpalign {

std::string ShapeString(const Shape& shape) {
  return "[" + absl::StrJoin(shape, ",") + "]";
}

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(NumElements(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (NumElements(shape_) != static_cast<int64_t>(data_.size())) {
    throw std::invalid_argument("Tensor: shape " + ShapeString(shape_) +
                                " does not match " +
                                std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::Full(Shape shape, double value) {
  Tensor t(std::move(shape));
  for (double& x : t.data_) x = value;
  return t;
}

bool Tensor::AllFinite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace dpalign

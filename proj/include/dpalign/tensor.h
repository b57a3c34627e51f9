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

#ifndef DPALIGN_TENSOR_H_
#define DPALIGN_TENSOR_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dpalign {

using Shape = std::vector<int64_t>;

std::string ShapeString(const Shape& shape);
int64_t NumElements(const Shape& shape);

// Dense row-major array. Values are held in double precision so that every
// reduction runs in a 64-bit accumulator; parameters that are persisted are
// kept representable in float32 (see ParameterSet::RoundToFloat).
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Scalar(double value) { return Tensor({1}, {value}); }
  static Tensor Full(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[i]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // Rows/cols of a tensor viewed as a matrix; rank-1 tensors are one row.
  int64_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  int64_t cols() const { return rank() == 2 ? shape_[1] : size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[i]; }
  double operator[](int64_t i) const { return data_[i]; }
  double& at(int64_t r, int64_t c) { return data_[r * cols() + c]; }
  double at(int64_t r, int64_t c) const { return data_[r * cols() + c]; }

  double item() const { return data_.front(); }
  bool AllFinite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace dpalign

#endif  // DPALIGN_TENSOR_H_

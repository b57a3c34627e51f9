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

#ifndef DPALIGN_TAPE_H_
#define DPALIGN_TAPE_H_

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "absl/status/status.h"
#include "dpalign/tensor.h"

namespace dpalign {

class Tape;

// Handle to a node on a Tape. Invalid handles (id < 0) are produced once the
// tape has recorded an error; every op on an invalid handle is a no-op.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

// Records primitive ops in execution order (which is a topological order) and
// runs reverse-mode differentiation over them.
//
// Errors are sticky: the first failing op stores its status on the tape and
// every later op returns an invalid Var. Callers check status() once at the
// end of a forward computation.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  // With record_gradients=false no backward closures are kept and no node
  // requires gradients (inference mode).
  explicit Tape(bool record_gradients = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var Constant(Tensor value);
  // Leaves backed by caller-owned storage, which must outlive the tape.
  Var Parameter(const Tensor* value);
  Var ConstantRef(const Tensor* value);

  const Tensor& value(Var v) const;
  // Gradient of the last Backward() loss w.r.t. v; zeros if v did not
  // influence the loss.
  Tensor Grad(Var v) const;

  absl::Status Backward(Var loss);

  const absl::Status& status() const { return status_; }
  bool ok() const { return status_.ok(); }
  bool recording() const { return record_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  // Number of node backward closures executed by the last Backward().
  int64_t backward_visits() const { return backward_visits_; }
  std::string_view op_name(int id) const { return nodes_[id].op; }
  std::span<const int> inputs(int id) const { return nodes_[id].inputs; }

  // Op-implementation interface.
  Var Record(const char* op, Tensor value, std::vector<int> inputs,
             BackwardFn backward);
  Var Fail(absl::Status status);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad_of(int id) const { return nodes_[id].grad; }
  // Gradient buffer of `id`, zero-initialised on first use.
  std::vector<double>& MutableGrad(int id);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const char* op = "";
    std::vector<double> grad;
  };

  bool record_;
  std::vector<Node> nodes_;
  absl::Status status_;
  int64_t backward_visits_ = 0;
};

// ---------------------------------------------------------------------------
// Primitive ops. Matrices are rank-2 [rows, cols]; vectors are rank-1.

Var MatMul(Var a, Var b);        // [n,k] x [k,m] -> [n,m]
Var MatMulTransB(Var a, Var b);  // [n,k] x [m,k]^T -> [n,m]
Var Transpose(Var a);

Var Add(Var a, Var b);  // same shape
Var Sub(Var a, Var b);
Var Mul(Var a, Var b);
Var AddBias(Var a, Var bias);  // [n,m] + [m]
Var Scale(Var a, double c);
Var AddScalar(Var a, double c);

Var Exp(Var a);
Var Log(Var a);
Var Sigmoid(Var a);
Var Softplus(Var a);  // log(1 + e^x)
Var Tanh(Var a);
Var Gelu(Var a);  // tanh approximation
Var Square(Var a);
Var Clamp(Var a, double lo, double hi);
Var Maximum(Var a, Var b);
Var Minimum(Var a, Var b);

Var SoftmaxRows(Var a);
Var LogSoftmaxRows(Var a);
// Row-wise softmax over columns j <= i; entries above the diagonal are zero.
Var CausalSoftmaxRows(Var a);
Var LayerNormRows(Var x, Var gain, Var bias, double eps = 1e-5);

Var Embedding(Var table, std::span<const int> ids);   // [V,d] -> [n,d]
Var PickCols(Var a, std::span<const int> cols);       // [n,m] -> [n]
Var SliceRows(Var a, int64_t start, int64_t len);
Var SliceCols(Var a, int64_t start, int64_t len);
Var ConcatCols(std::span<const Var> parts);
Var Reshape(Var a, Shape shape);

Var Sum(Var a);   // -> [1]
Var Mean(Var a);  // -> [1]

}  // namespace dpalign

#endif  // DPALIGN_TAPE_H_

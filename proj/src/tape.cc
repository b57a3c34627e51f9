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

#include "dpalign/tape.h"

#include <algorithm>
#include <cmath>
#include <utility>

#include "absl/strings/str_cat.h"

namespace dpalign {
namespace {

const Tensor& EmptyTensor() {
  static const Tensor* empty = new Tensor();
  return *empty;
}

absl::Status ShapeError(const char* op, const std::string& what,
                        const Shape& a, const Shape& b) {
  return absl::InvalidArgumentError(absl::StrCat(
      op, ": ", what, " (", ShapeString(a), " vs ", ShapeString(b), ")"));
}

absl::Status ShapeError(const char* op, const std::string& what,
                        const Shape& a) {
  return absl::InvalidArgumentError(
      absl::StrCat(op, ": ", what, " (", ShapeString(a), ")"));
}

// Returns the tape shared by all valid inputs, or nullptr if any is invalid.
Tape* TapeOf(std::initializer_list<Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) return nullptr;
    if (tape == nullptr) tape = v.tape;
    if (v.tape != tape) return nullptr;
  }
  return tape;
}


template <typename Fwd, typename Deriv>
Var Unary(const char* op, Var a, Fwd fwd, Deriv deriv) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  int ia = a.id;
  return t->Record(op, std::move(y), {ia}, [ia, deriv](Tape& tp, int self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& xv = tp.value(Var{&tp, ia});
    const Tensor& yv = tp.value(Var{&tp, self});
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (int64_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
  });
}

bool SameShape(Var a, Var b) { return a.value().shape() == b.value().shape(); }

bool IsMatrix(const Tensor& t) { return t.rank() == 2; }

}  // namespace

const Tensor& Var::value() const {
  return valid() ? tape->value(*this) : EmptyTensor();
}

Tape::Tape(bool record_gradients) : record_(record_gradients) {
  nodes_.reserve(256);
}

Var Tape::Constant(Tensor value) {
  if (!ok()) return {};
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{this, num_nodes() - 1};
}

Var Tape::Parameter(const Tensor* value) {
  if (!ok()) return {};
  Node n;
  n.external = value;
  n.requires_grad = record_;
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  return Var{this, num_nodes() - 1};
}

Var Tape::ConstantRef(const Tensor* value) {
  if (!ok()) return {};
  Node n;
  n.external = value;
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{this, num_nodes() - 1};
}

const Tensor& Tape::value(Var v) const {
  if (v.id < 0 || v.id >= num_nodes()) return EmptyTensor();
  const Node& n = nodes_[v.id];
  return n.external != nullptr ? *n.external : n.value;
}

Tensor Tape::Grad(Var v) const {
  const Tensor& val = value(v);
  Tensor g(val.shape());
  if (v.id >= 0 && v.id < num_nodes() && !nodes_[v.id].grad.empty()) {
    g.vec() = nodes_[v.id].grad;
  }
  return g;
}

Var Tape::Record(const char* op, Tensor value, std::vector<int> inputs,
                 BackwardFn backward) {
  if (!ok()) return {};
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (record_) {
    for (int id : inputs) {
      if (nodes_[id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var{this, num_nodes() - 1};
}

Var Tape::Fail(absl::Status status) {
  if (ok()) status_ = std::move(status);
  return {};
}

std::vector<double>& Tape::MutableGrad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(Var{this, id}).size(), 0.0);
  return n.grad;
}

absl::Status Tape::Backward(Var loss) {
  if (!ok()) return status_;
  if (!loss.valid() || loss.tape != this) {
    return absl::InvalidArgumentError("Backward: invalid loss node");
  }
  if (value(loss).size() != 1) {
    return absl::InvalidArgumentError(absl::StrCat(
        "Backward: loss must be scalar, got shape ",
        ShapeString(value(loss).shape())));
  }
  for (Node& n : nodes_) n.grad.clear();
  backward_visits_ = 0;
  if (!nodes_[loss.id].requires_grad) return absl::OkStatus();
  MutableGrad(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    ++backward_visits_;
    n.backward(*this, id);
  }
  return absl::OkStatus();
}

// ---------------------------------------------------------------------------

Var MatMul(Var a, Var b) {
  Tape* t = TapeOf({a, b});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (!IsMatrix(x) || !IsMatrix(w) || x.dim(1) != w.dim(0)) {
    return t->Fail(ShapeError("MatMul", "inner dimensions differ", x.shape(),
                              w.shape()));
  }
  const int64_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
  Tensor y({n, m});
  std::vector<double> acc(m);
  for (int64_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* wr = &w.data()[p * m];
      for (int64_t j = 0; j < m; ++j) acc[j] += xv * wr[j];
    }
    std::copy(acc.begin(), acc.end(), &y.data()[i * m]);
  }
  int ia = a.id, ib = b.id;
  return t->Record("matmul", std::move(y), {ia, ib},
                   [ia, ib, n, k, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    const Tensor& xv = tp.value(Var{&tp, ia});
    const Tensor& wv = tp.value(Var{&tp, ib});
    if (tp.requires_grad(ia)) {
      auto& gx = tp.MutableGrad(ia);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* wr = &wv.data()[p * m];
          const double* gr = &gy[i * m];
          for (int64_t j = 0; j < m; ++j) s += gr[j] * wr[j];
          gx[i * k + p] += s;
        }
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gw = tp.MutableGrad(ib);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t p = 0; p < k; ++p) {
          const double xv_ip = xv[i * k + p];
          if (xv_ip == 0.0) continue;
          double* gr = &gw[p * m];
          const double* g = &gy[i * m];
          for (int64_t j = 0; j < m; ++j) gr[j] += xv_ip * g[j];
        }
      }
    }
  });
}

Var MatMulTransB(Var a, Var b) {
  Tape* t = TapeOf({a, b});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (!IsMatrix(x) || !IsMatrix(w) || x.dim(1) != w.dim(1)) {
    return t->Fail(ShapeError("MatMulTransB", "inner dimensions differ",
                              x.shape(), w.shape()));
  }
  const int64_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
  Tensor y({n, m});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += x[i * k + p] * w[j * k + p];
      y[i * m + j] = s;
    }
  }
  int ia = a.id, ib = b.id;
  return t->Record("matmul_tb", std::move(y), {ia, ib},
                   [ia, ib, n, k, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    const Tensor& xv = tp.value(Var{&tp, ia});
    const Tensor& wv = tp.value(Var{&tp, ib});
    if (tp.requires_grad(ia)) {
      auto& gx = tp.MutableGrad(ia);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < m; ++j) {
          const double g = gy[i * m + j];
          for (int64_t p = 0; p < k; ++p) gx[i * k + p] += g * wv[j * k + p];
        }
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gw = tp.MutableGrad(ib);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < m; ++j) {
          const double g = gy[i * m + j];
          for (int64_t p = 0; p < k; ++p) gw[j * k + p] += g * xv[i * k + p];
        }
      }
    }
  });
}

Var Transpose(Var a) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  if (!IsMatrix(x)) return t->Fail(ShapeError("Transpose", "needs a matrix", x.shape()));
  const int64_t n = x.dim(0), m = x.dim(1);
  Tensor y({m, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) y[j * n + i] = x[i * m + j];
  int ia = a.id;
  return t->Record("transpose", std::move(y), {ia}, [ia, n, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) gx[i * m + j] += gy[j * n + i];
  });
}

namespace {

template <typename Fwd, typename DA, typename DB>
Var Binary(const char* op, Var a, Var b, Fwd fwd, DA da, DB db) {
  Tape* t = TapeOf({a, b});
  if (t == nullptr) return {};
  if (!SameShape(a, b)) {
    return t->Fail(ShapeError(op, "shape mismatch", a.value().shape(),
                              b.value().shape()));
  }
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i], z[i]);
  int ia = a.id, ib = b.id;
  return t->Record(op, std::move(y), {ia, ib}, [ia, ib, da, db](Tape& tp, int self) {
    const Tensor& xv = tp.value(Var{&tp, ia});
    const Tensor& zv = tp.value(Var{&tp, ib});
    const auto& gy = tp.grad_of(self);
    if (tp.requires_grad(ia)) {
      auto& g = tp.MutableGrad(ia);
      for (int64_t i = 0; i < xv.size(); ++i) g[i] += gy[i] * da(xv[i], zv[i]);
    }
    if (tp.requires_grad(ib)) {
      auto& g = tp.MutableGrad(ib);
      for (int64_t i = 0; i < xv.size(); ++i) g[i] += gy[i] * db(xv[i], zv[i]);
    }
  });
}

}  // namespace

Var Add(Var a, Var b) {
  return Binary(
      "add", a, b, [](double x, double z) { return x + z; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var Sub(Var a, Var b) {
  return Binary(
      "sub", a, b, [](double x, double z) { return x - z; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var Mul(Var a, Var b) {
  return Binary(
      "mul", a, b, [](double x, double z) { return x * z; },
      [](double, double z) { return z; }, [](double x, double) { return x; });
}

Var Maximum(Var a, Var b) {
  return Binary(
      "maximum", a, b, [](double x, double z) { return x >= z ? x : z; },
      [](double x, double z) { return x >= z ? 1.0 : 0.0; },
      [](double x, double z) { return x >= z ? 0.0 : 1.0; });
}

Var Minimum(Var a, Var b) {
  return Binary(
      "minimum", a, b, [](double x, double z) { return x <= z ? x : z; },
      [](double x, double z) { return x <= z ? 1.0 : 0.0; },
      [](double x, double z) { return x <= z ? 0.0 : 1.0; });
}

Var AddBias(Var a, Var bias) {
  Tape* t = TapeOf({a, bias});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (!IsMatrix(x) || b.size() != x.dim(1)) {
    return t->Fail(ShapeError("AddBias", "bias length must equal column count",
                              x.shape(), b.shape()));
  }
  const int64_t n = x.dim(0), m = x.dim(1);
  Tensor y(x.shape());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) y[i * m + j] = x[i * m + j] + b[j];
  int ia = a.id, ib = bias.id;
  return t->Record("add_bias", std::move(y), {ia, ib}, [ia, ib, n, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    if (tp.requires_grad(ia)) {
      auto& g = tp.MutableGrad(ia);
      for (int64_t i = 0; i < n * m; ++i) g[i] += gy[i];
    }
    if (tp.requires_grad(ib)) {
      auto& g = tp.MutableGrad(ib);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) g[j] += gy[i * m + j];
    }
  });
}

Var Scale(Var a, double c) {
  return Unary("scale", a, [c](double x) { return c * x; },
               [c](double, double) { return c; });
}

Var AddScalar(Var a, double c) {
  return Unary("add_scalar", a, [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

Var Exp(Var a) {
  return Unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var Log(Var a) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  for (double x : a.value().data()) {
    if (!(x > 0.0)) {
      return t->Fail(absl::InvalidArgumentError("Log: non-positive input"));
    }
  }
  return Unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var Sigmoid(Var a) {
  return Unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var Softplus(Var a) {
  return Unary(
      "softplus", a,
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var Tanh(Var a) {
  return Unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var Gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return Unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double th = std::tanh(kC * (x + kA * x * x * x));
        return 0.5 * (1.0 + th) +
               0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
      });
}

Var Square(Var a) {
  return Unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var Clamp(Var a, double lo, double hi) {
  return Unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

namespace {

enum class SoftmaxKind { kPlain, kLog, kCausal };

Var SoftmaxImpl(const char* op, Var a, SoftmaxKind kind) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  if (x.rank() != 1 && x.rank() != 2) {
    return t->Fail(ShapeError(op, "needs a vector or matrix", x.shape()));
  }
  const int64_t n = x.rows(), m = x.cols();
  if (kind == SoftmaxKind::kCausal && n > m) {
    return t->Fail(ShapeError(op, "more rows than columns", x.shape()));
  }
  Tensor y(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    // For causal rows, row i of an [n,m] score matrix attends to the first
    // m - n + i + 1 columns (queries are the last n positions).
    const int64_t width = kind == SoftmaxKind::kCausal ? m - n + i + 1 : m;
    const double* xr = &x.data()[i * m];
    double* yr = &y.data()[i * m];
    double mx = xr[0];
    for (int64_t j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int64_t j = 0; j < width; ++j) s += std::exp(xr[j] - mx);
    if (kind == SoftmaxKind::kLog) {
      const double lse = mx + std::log(s);
      for (int64_t j = 0; j < m; ++j) yr[j] = xr[j] - lse;
    } else {
      for (int64_t j = 0; j < width; ++j) yr[j] = std::exp(xr[j] - mx) / s;
    }
  }
  int ia = a.id;
  return t->Record(op, std::move(y), {ia}, [ia, n, m, kind](Tape& tp, int self) {
    const Tensor& yv = tp.value(Var{&tp, self});
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (int64_t i = 0; i < n; ++i) {
      const int64_t width = kind == SoftmaxKind::kCausal ? m - n + i + 1 : m;
      const double* yr = &yv.data()[i * m];
      const double* gr = &gy[i * m];
      double* gxr = &gx[i * m];
      if (kind == SoftmaxKind::kLog) {
        double gs = 0.0;
        for (int64_t j = 0; j < m; ++j) gs += gr[j];
        for (int64_t j = 0; j < m; ++j) gxr[j] += gr[j] - std::exp(yr[j]) * gs;
      } else {
        double dot = 0.0;
        for (int64_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
        for (int64_t j = 0; j < width; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    }
  });
}

}  // namespace

Var SoftmaxRows(Var a) { return SoftmaxImpl("softmax", a, SoftmaxKind::kPlain); }
Var LogSoftmaxRows(Var a) {
  return SoftmaxImpl("log_softmax", a, SoftmaxKind::kLog);
}
Var CausalSoftmaxRows(Var a) {
  return SoftmaxImpl("causal_softmax", a, SoftmaxKind::kCausal);
}

Var LayerNormRows(Var x, Var gain, Var bias, double eps) {
  Tape* t = TapeOf({x, gain, bias});
  if (t == nullptr) return {};
  const Tensor& xv = x.value();
  const int64_t n = xv.rows(), m = xv.cols();
  if (gain.value().size() != m || bias.value().size() != m) {
    return t->Fail(ShapeError("LayerNorm", "gain/bias length must equal columns",
                              xv.shape(), gain.value().shape()));
  }
  const Tensor& g = gain.value();
  const Tensor& b = bias.value();
  Tensor y(xv.shape());
  // Saved normalized values and inverse std per row for backward.
  auto xhat = std::make_shared<std::vector<double>>(n * m);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (int64_t i = 0; i < n; ++i) {
    const double* xr = &xv.data()[i * m];
    double mean = 0.0;
    for (int64_t j = 0; j < m; ++j) mean += xr[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (int64_t j = 0; j < m; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int64_t j = 0; j < m; ++j) {
      const double h = (xr[j] - mean) * is;
      (*xhat)[i * m + j] = h;
      y[i * m + j] = h * g[j] + b[j];
    }
  }
  int ix = x.id, ig = gain.id, ib = bias.id;
  return t->Record("layer_norm", std::move(y), {ix, ig, ib},
                   [ix, ig, ib, n, m, xhat, inv_std](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    const Tensor& gv = tp.value(Var{&tp, ig});
    if (tp.requires_grad(ig)) {
      auto& gg = tp.MutableGrad(ig);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) gg[j] += gy[i * m + j] * (*xhat)[i * m + j];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.MutableGrad(ib);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) gb[j] += gy[i * m + j];
    }
    if (tp.requires_grad(ix)) {
      auto& gx = tp.MutableGrad(ix);
      std::vector<double> dh(m);
      for (int64_t i = 0; i < n; ++i) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int64_t j = 0; j < m; ++j) {
          dh[j] = gy[i * m + j] * gv[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * (*xhat)[i * m + j];
        }
        mean_dh /= static_cast<double>(m);
        mean_dh_h /= static_cast<double>(m);
        for (int64_t j = 0; j < m; ++j) {
          gx[i * m + j] +=
              (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)[i * m + j] * mean_dh_h);
        }
      }
    }
  });
}

Var Embedding(Var table, std::span<const int> ids) {
  Tape* t = TapeOf({table});
  if (t == nullptr) return {};
  const Tensor& w = table.value();
  if (!IsMatrix(w)) return t->Fail(ShapeError("Embedding", "table must be a matrix", w.shape()));
  const int64_t v = w.dim(0), d = w.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      return t->Fail(absl::InvalidArgumentError(absl::StrCat(
          "Embedding: id ", ids[i], " out of range for table ", ShapeString(w.shape()))));
    }
    std::copy_n(&w.data()[ids[i] * d], d, &y.data()[i * d]);
  }
  int ia = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return t->Record("embedding", std::move(y), {ia}, [ia, idv, d](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gw = tp.MutableGrad(ia);
    for (size_t i = 0; i < idv.size(); ++i)
      for (int64_t j = 0; j < d; ++j) gw[idv[i] * d + j] += gy[i * d + j];
  });
}

Var PickCols(Var a, std::span<const int> cols) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  const int64_t n = x.rows(), m = x.cols();
  if (static_cast<int64_t>(cols.size()) != n) {
    return t->Fail(ShapeError("PickCols", "one index per row required", x.shape(),
                              {static_cast<int64_t>(cols.size())}));
  }
  Tensor y({n});
  for (int64_t i = 0; i < n; ++i) {
    if (cols[i] < 0 || cols[i] >= m) {
      return t->Fail(absl::InvalidArgumentError(
          absl::StrCat("PickCols: column ", cols[i], " out of range")));
    }
    y[i] = x[i * m + cols[i]];
  }
  int ia = a.id;
  std::vector<int> cv(cols.begin(), cols.end());
  return t->Record("pick_cols", std::move(y), {ia}, [ia, cv, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (size_t i = 0; i < cv.size(); ++i) gx[i * m + cv[i]] += gy[i];
  });
}

Var SliceRows(Var a, int64_t start, int64_t len) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  if (!IsMatrix(x) || start < 0 || len < 1 || start + len > x.dim(0)) {
    return t->Fail(ShapeError("SliceRows",
                              absl::StrCat("rows [", start, ",", start + len, ") out of range"),
                              x.shape()));
  }
  const int64_t m = x.dim(1);
  Tensor y({len, m});
  std::copy_n(&x.data()[start * m], len * m, y.data().data());
  int ia = a.id;
  return t->Record("slice_rows", std::move(y), {ia}, [ia, start, len, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (int64_t i = 0; i < len * m; ++i) gx[start * m + i] += gy[i];
  });
}

Var SliceCols(Var a, int64_t start, int64_t len) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  if (!IsMatrix(x) || start < 0 || len < 1 || start + len > x.dim(1)) {
    return t->Fail(ShapeError("SliceCols",
                              absl::StrCat("cols [", start, ",", start + len, ") out of range"),
                              x.shape()));
  }
  const int64_t n = x.dim(0), m = x.dim(1);
  Tensor y({n, len});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < len; ++j) y[i * len + j] = x[i * m + start + j];
  int ia = a.id;
  return t->Record("slice_cols", std::move(y), {ia}, [ia, start, len, n, m](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < len; ++j) gx[i * m + start + j] += gy[i * len + j];
  });
}

Var ConcatCols(std::span<const Var> parts) {
  if (parts.empty() || !parts[0].valid()) return {};
  Tape* t = parts[0].tape;
  int64_t n = parts[0].value().rows();
  int64_t total = 0;
  std::vector<int> ids;
  std::vector<int64_t> widths;
  for (const Var& p : parts) {
    if (!p.valid() || p.tape != t) return {};
    const Tensor& x = p.value();
    if (!IsMatrix(x) || x.dim(0) != n) {
      return t->Fail(ShapeError("ConcatCols", "row counts differ", parts[0].value().shape(),
                                x.shape()));
    }
    ids.push_back(p.id);
    widths.push_back(x.dim(1));
    total += x.dim(1);
  }
  Tensor y({n, total});
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < widths[k]; ++j) y[i * total + off + j] = x[i * widths[k] + j];
    off += widths[k];
  }
  return t->Record("concat_cols", std::move(y), ids, [ids, widths, n, total](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    int64_t o = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        auto& gx = tp.MutableGrad(ids[k]);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < widths[k]; ++j) gx[i * widths[k] + j] += gy[i * total + o + j];
      }
      o += widths[k];
    }
  });
}

Var Reshape(Var a, Shape shape) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const Tensor& x = a.value();
  if (NumElements(shape) != x.size()) {
    return t->Fail(ShapeError("Reshape", "element count differs", x.shape(), shape));
  }
  Tensor y(std::move(shape), x.vec());
  int ia = a.id;
  return t->Record("reshape", std::move(y), {ia}, [ia](Tape& tp, int self) {
    const auto& gy = tp.grad_of(self);
    auto& gx = tp.MutableGrad(ia);
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var Sum(Var a) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  int ia = a.id;
  return t->Record("sum", Tensor::Scalar(s), {ia}, [ia](Tape& tp, int self) {
    const double g = tp.grad_of(self)[0];
    auto& gx = tp.MutableGrad(ia);
    for (double& v : gx) v += g;
  });
}

Var Mean(Var a) {
  Tape* t = TapeOf({a});
  if (t == nullptr) return {};
  const int64_t n = a.value().size();
  if (n == 0) return t->Fail(absl::InvalidArgumentError("Mean: empty input"));
  return Scale(Sum(a), 1.0 / static_cast<double>(n));
}

}  // namespace dpalign

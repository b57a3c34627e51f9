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

#include "tests/oracles.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

namespace dpalign::testing {

std::vector<double> FiniteDifferenceGradient(
    ParameterSet params, const std::vector<std::string>& names,
    const std::function<double(const ParameterSet&)>& f, double h) {
  std::vector<double> grad;
  for (const std::string& name : names) {
    Tensor& t = params.GetMutable(name);
    for (int64_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = f(params);
      t[i] = orig - h;
      const double down = f(params);
      t[i] = orig;
      grad.push_back((up - down) / (2.0 * h));
    }
  }
  return grad;
}

double MaxRelativeError(const std::vector<double>& a,
                        const std::vector<double>& b, double floor) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

namespace {

Tensor RandomTensor(Rng& rng, Shape shape, double scale) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = scale * rng.Normal();
  return t;
}

}  // namespace

RandomNetwork RandomNetwork::Sample(Rng& rng) {
  RandomNetwork net;
  const int64_t n = 1 + static_cast<int64_t>(rng.UniformInt(4));
  const int64_t d0 = 2 + static_cast<int64_t>(rng.UniformInt(4));
  const int64_t d1 = 2 + static_cast<int64_t>(rng.UniformInt(5));
  const int64_t d2 = 2 + static_cast<int64_t>(rng.UniformInt(4));
  net.input = RandomTensor(rng, {n, d0}, 1.0);
  net.params.Add("w1", RandomTensor(rng, {d0, d1}, 0.7));
  net.params.Add("b1", RandomTensor(rng, {d1}, 0.3));
  net.params.Add("w2", RandomTensor(rng, {d1, d2}, 0.7));
  net.params.Add("b2", RandomTensor(rng, {d2}, 0.3));
  net.activation = static_cast<int>(rng.UniformInt(4));
  net.layer_norm = rng.Bernoulli(0.5);
  if (net.layer_norm) {
    Tensor g = RandomTensor(rng, {d1}, 0.3);
    for (double& x : g.data()) x += 1.0;
    net.params.Add("ln.g", std::move(g));
    net.params.Add("ln.b", RandomTensor(rng, {d1}, 0.3));
  }
  net.head = static_cast<int>(rng.UniformInt(3));
  for (int64_t i = 0; i < n; ++i) {
    net.labels.push_back(static_cast<int>(rng.UniformInt(d2)));
  }
  net.trainable = net.params.names();
  return net;
}

Var RandomNetwork::Loss(BoundParams& bound) const {
  Tape& tape = bound.tape();
  Var x = tape.ConstantRef(&input);
  Var h = AddBias(MatMul(x, bound["w1"]), bound["b1"]);
  switch (activation) {
    case 0: h = Tanh(h); break;
    case 1: h = Gelu(h); break;
    case 2: h = Sigmoid(h); break;
    default: h = Softplus(h); break;
  }
  if (layer_norm) h = LayerNormRows(h, bound["ln.g"], bound["ln.b"]);
  Var out = AddBias(MatMul(h, bound["w2"]), bound["b2"]);
  switch (head) {
    case 0:
      return Scale(Mean(PickCols(LogSoftmaxRows(out), labels)), -1.0);
    case 1:
      return Mean(Square(out));
    default: {
      Var p = SoftmaxRows(out);
      return Sum(Mul(p, Exp(Scale(out, 0.5))));
    }
  }
}

double RandomNetwork::Evaluate(const ParameterSet& p) const {
  Tape tape(false);
  BoundParams bound(tape, p, nullptr);
  return Loss(bound).value().item();
}

void BruteForceGae(const std::vector<double>& values,
                   const std::vector<double>& scores, double gamma,
                   double lambda, std::vector<double>* advantages) {
  const size_t n = values.size();
  advantages->assign(n, 0.0);
  for (size_t t = 0; t < n; ++t) {
    double a = 0.0;
    for (size_t k = 0; t + k < n; ++k) {
      const size_t j = t + k;
      const double next = j + 1 < n ? values[j + 1] : 0.0;
      const double delta = scores[j] + gamma * next - values[j];
      a += std::pow(gamma * lambda, static_cast<double>(k)) * delta;
    }
    (*advantages)[t] = a;
  }
}

namespace {

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double GaussianDelta(double sigma, double eps) {
  const double a = 1.0 / (2.0 * sigma);
  return Phi(-eps * sigma + a) - std::exp(eps) * Phi(-eps * sigma - a);
}

}  // namespace

double AnalyticGaussianEpsilon(double sigma, double delta) {
  double lo = 0.0, hi = 1.0;
  while (GaussianDelta(sigma, hi) > delta) hi *= 2.0;
  if (GaussianDelta(sigma, lo) <= delta) return 0.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (GaussianDelta(sigma, mid) > delta ? lo : hi) = mid;
  }
  return hi;
}

double SubsampledGaussianLogMomentQuadrature(double q, double sigma,
                                             double alpha) {
  // Integrand in log space: log N(z;0,s^2) + alpha*log(1-q + q e^{(2z-1)/2s^2}).
  auto log_integrand = [&](double z) {
    const double log_density = -0.5 * z * z / (sigma * sigma) -
                               std::log(sigma * std::sqrt(2.0 * M_PI));
    const double u = (2.0 * z - 1.0) / (2.0 * sigma * sigma);
    // log((1-q) + q e^u), evaluated stably.
    const double a = std::log1p(-q), b = std::log(q) + u;
    const double m = std::max(a, b);
    const double mix = m + std::log(std::exp(a - m) + std::exp(b - m));
    return log_density + alpha * mix;
  };
  const double lo = -40.0 * sigma;
  const double hi = 40.0 * sigma + alpha / (sigma * sigma) + 10.0;
  const int n = 400000;  // even
  const double h = (hi - lo) / n;
  double peak = -INFINITY;
  for (int i = 0; i <= n; ++i) peak = std::max(peak, log_integrand(lo + i * h));
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    s += w * std::exp(log_integrand(lo + i * h) - peak);
  }
  return peak + std::log(s * h / 3.0);
}

int64_t LcsLength(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<size_t, size_t>, int64_t> memo;
  std::function<int64_t(size_t, size_t)> rec = [&](size_t i, size_t j) -> int64_t {
    if (i == a.size() || j == b.size()) return 0;
    auto key = std::make_pair(i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    int64_t r = a[i] == b[j] ? 1 + rec(i + 1, j + 1)
                             : std::max(rec(i + 1, j), rec(i, j + 1));
    memo[key] = r;
    return r;
  };
  return rec(0, 0);
}

}  // namespace dpalign::testing

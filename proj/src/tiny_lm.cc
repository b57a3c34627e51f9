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

#include "dpalign/tiny_lm.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {
namespace {

std::string Layer(int l, const char* suffix) {
  return absl::StrCat("h", l, ".", suffix);
}

Tensor Gaussian(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = stddev * rng.Normal();
  return t;
}

// Effective weight of an attention matrix, W + A*B when adapters are present.
Var EffectiveWeight(const TinyLMConfig& config, BoundParams& p,
                    const std::string& name) {
  Var w = p[name];
  if (config.adapter_rank == 0) return w;
  return Add(w, MatMul(p[TinyLM::AdapterA(name)], p[TinyLM::AdapterB(name)]));
}

Var Linear(BoundParams& p, Var x, const std::string& w, const std::string& b) {
  return AddBias(MatMul(x, p[w]), p[b]);
}

// Final hidden states [n, d] of a token sequence.
Var Trunk(const TinyLMConfig& config, BoundParams& p, const TokenSeq& tokens) {
  Tape& tape = p.tape();
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n == 0) {
    return tape.Fail(absl::InvalidArgumentError("TinyLM: empty input sequence"));
  }
  if (n > config.context_len) {
    return tape.Fail(absl::InvalidArgumentError(absl::StrCat(
        "TinyLM: sequence length ", n, " exceeds context_len ", config.context_len)));
  }
  std::vector<int> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  Var x = Add(Embedding(p["tok_emb"], tokens), Embedding(p["pos_emb"], positions));
  const int64_t hd = config.d_model / config.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = 0; l < config.n_layers; ++l) {
    Var h = LayerNormRows(x, p[Layer(l, "ln1.g")], p[Layer(l, "ln1.b")]);
    Var q = AddBias(MatMul(h, EffectiveWeight(config, p, Layer(l, "attn.wq"))),
                    p[Layer(l, "attn.bq")]);
    Var k = Linear(p, h, Layer(l, "attn.wk"), Layer(l, "attn.bk"));
    Var v = AddBias(MatMul(h, EffectiveWeight(config, p, Layer(l, "attn.wv"))),
                    p[Layer(l, "attn.bv")]);
    std::vector<Var> heads;
    heads.reserve(config.n_heads);
    for (int head = 0; head < config.n_heads; ++head) {
      Var qh = SliceCols(q, head * hd, hd);
      Var kh = SliceCols(k, head * hd, hd);
      Var vh = SliceCols(v, head * hd, hd);
      Var att = CausalSoftmaxRows(Scale(MatMulTransB(qh, kh), scale));
      heads.push_back(MatMul(att, vh));
    }
    Var attn = Linear(p, ConcatCols(heads), Layer(l, "attn.wo"), Layer(l, "attn.bo"));
    x = Add(x, attn);
    Var m = LayerNormRows(x, p[Layer(l, "ln2.g")], p[Layer(l, "ln2.b")]);
    m = Gelu(Linear(p, m, Layer(l, "mlp.w1"), Layer(l, "mlp.b1")));
    x = Add(x, Linear(p, m, Layer(l, "mlp.w2"), Layer(l, "mlp.b2")));
  }
  return LayerNormRows(x, p["ln_f.g"], p["ln_f.b"]);
}

TokenSeq Concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

absl::Status CheckTokens(const TinyLMConfig& config, const TokenSeq& tokens) {
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      return absl::InvalidArgumentError(
          absl::StrCat("token id ", t, " outside vocabulary of size ", config.vocab_size));
    }
  }
  return absl::OkStatus();
}

}  // namespace

absl::Status TinyLMConfig::Validate() const {
  if (vocab_size < 2) return absl::InvalidArgumentError("vocab_size must be >= 2");
  if (context_len < 2) return absl::InvalidArgumentError("context_len must be >= 2");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    return absl::InvalidArgumentError(absl::StrCat(
        "d_model (", d_model, ") must be a positive multiple of n_heads (", n_heads, ")"));
  }
  if (n_layers < 0) return absl::InvalidArgumentError("n_layers must be >= 0");
  if (adapter_rank < 0) return absl::InvalidArgumentError("adapter_rank must be >= 0");
  return absl::OkStatus();
}

absl::StatusOr<TinyLM> TinyLM::Create(const TinyLMConfig& config) {
  RETURN_IF_ERROR(config.Validate());
  Rng rng = Rng::Substream(config.seed, "init");
  const int64_t d = config.d_model, v = config.vocab_size;
  const double std_w = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * std::max(1, config.n_layers));
  ParameterSet p;
  p.Add("tok_emb", Gaussian(rng, {v, d}, std_w));
  p.Add("pos_emb", Gaussian(rng, {config.context_len, d}, std_w));
  for (int l = 0; l < config.n_layers; ++l) {
    p.Add(Layer(l, "ln1.g"), Tensor::Full({d}, 1.0));
    p.Add(Layer(l, "ln1.b"), Tensor({d}));
    for (const char* m : {"q", "k", "v"}) {
      p.Add(Layer(l, absl::StrCat("attn.w", m).c_str()), Gaussian(rng, {d, d}, std_w));
      p.Add(Layer(l, absl::StrCat("attn.b", m).c_str()), Tensor({d}));
    }
    p.Add(Layer(l, "attn.wo"), Gaussian(rng, {d, d}, std_res));
    p.Add(Layer(l, "attn.bo"), Tensor({d}));
    p.Add(Layer(l, "ln2.g"), Tensor::Full({d}, 1.0));
    p.Add(Layer(l, "ln2.b"), Tensor({d}));
    p.Add(Layer(l, "mlp.w1"), Gaussian(rng, {d, 4 * d}, std_w));
    p.Add(Layer(l, "mlp.b1"), Tensor({4 * d}));
    p.Add(Layer(l, "mlp.w2"), Gaussian(rng, {4 * d, d}, std_res));
    p.Add(Layer(l, "mlp.b2"), Tensor({d}));
  }
  p.Add("ln_f.g", Tensor::Full({d}, 1.0));
  p.Add("ln_f.b", Tensor({d}));
  p.Add("lm_head.w", Gaussian(rng, {d, v}, std_w));
  p.Add("lm_head.b", Tensor({v}));
  p.Add("value_head.w", Gaussian(rng, {d, 1}, std_w));
  p.Add("value_head.b", Tensor({1}));
  p.Add("reward_head.w", Gaussian(rng, {d, 1}, std_w));
  p.Add("reward_head.b", Tensor({1}));
  if (config.adapter_rank > 0) {
    const int64_t r = config.adapter_rank;
    for (int l = 0; l < config.n_layers; ++l) {
      for (const char* m : {"attn.wq", "attn.wv"}) {
        const std::string name = Layer(l, m);
        p.Add(AdapterA(name), Gaussian(rng, {d, r}, 1.0 / std::sqrt(static_cast<double>(d))));
        p.Add(AdapterB(name), Tensor({r, d}));
      }
    }
  }
  p.RoundToFloat();
  return TinyLM(config, std::move(p));
}

absl::StatusOr<TinyLM> MakeTinyLM(TinyLMConfig config, ParameterSet params,
                                  std::map<std::string, std::string> metadata) {
  RETURN_IF_ERROR(config.Validate());
  ASSIGN_OR_RETURN(TinyLM reference, TinyLM::Create(config));
  if (reference.params().names() != params.names()) {
    return absl::InvalidArgumentError("parameter names do not match the model config");
  }
  for (const std::string& name : params.names()) {
    if (params.Get(name).shape() != reference.params().Get(name).shape()) {
      return absl::InvalidArgumentError(absl::StrCat(
          "parameter ", name, " has shape ", ShapeString(params.Get(name).shape()),
          ", expected ", ShapeString(reference.params().Get(name).shape())));
    }
  }
  TinyLM model(config, std::move(params));
  model.metadata_ = std::move(metadata);
  return model;
}

std::vector<std::string> TinyLM::AdaptedMatrices() const {
  std::vector<std::string> out;
  if (config_.adapter_rank == 0) return out;
  for (int l = 0; l < config_.n_layers; ++l) {
    out.push_back(Layer(l, "attn.wq"));
    out.push_back(Layer(l, "attn.wv"));
  }
  return out;
}

HeadVars ForwardHeadsOnTape(const TinyLMConfig& config, BoundParams& p,
                            const TokenSeq& prompt, const TokenSeq& response) {
  Tape& tape = p.tape();
  if (prompt.empty() || response.empty()) {
    tape.Fail(absl::InvalidArgumentError("ForwardHeads: prompt and response must be non-empty"));
    return {};
  }
  if (absl::Status s = CheckTokens(config, prompt); !s.ok()) { tape.Fail(s); return {}; }
  if (absl::Status s = CheckTokens(config, response); !s.ok()) { tape.Fail(s); return {}; }
  const int64_t plen = static_cast<int64_t>(prompt.size());
  const int64_t rlen = static_cast<int64_t>(response.size());
  Var hidden = Trunk(config, p, Concat(prompt, response));
  Var rows = SliceRows(hidden, plen - 1, rlen);
  HeadVars out;
  out.logits = Linear(p, rows, "lm_head.w", "lm_head.b");
  out.logprobs = PickCols(LogSoftmaxRows(out.logits), response);
  out.values = Reshape(Linear(p, rows, "value_head.w", "value_head.b"), {rlen});
  return out;
}

Var RewardScoreOnTape(const TinyLMConfig& config, BoundParams& p,
                      const TokenSeq& prompt, const TokenSeq& response) {
  Tape& tape = p.tape();
  size_t end = response.size();
  while (end > 0 && response[end - 1] == kPadToken) --end;
  if (end == 0) {
    return tape.Fail(absl::InvalidArgumentError("RewardScore: empty response"));
  }
  TokenSeq unpadded(response.begin(), response.begin() + end);
  if (absl::Status s = CheckTokens(config, prompt); !s.ok()) return tape.Fail(s);
  if (absl::Status s = CheckTokens(config, unpadded); !s.ok()) return tape.Fail(s);
  TokenSeq tokens = Concat(prompt, unpadded);
  Var hidden = Trunk(config, p, tokens);
  Var last = SliceRows(hidden, static_cast<int64_t>(tokens.size()) - 1, 1);
  return Reshape(Linear(p, last, "reward_head.w", "reward_head.b"), {1});
}

absl::StatusOr<HeadOutputs> ForwardHeads(const TinyLM& model, const TokenSeq& prompt,
                                         const TokenSeq& response) {
  Tape tape(false);
  BoundParams p(tape, model.params(), nullptr);
  HeadVars v = ForwardHeadsOnTape(model.config(), p, prompt, response);
  RETURN_IF_ERROR(tape.status());
  HeadOutputs out;
  out.logprobs = v.logprobs.value().vec();
  out.logits = v.logits.value();
  out.values = v.values.value().vec();
  return out;
}

absl::StatusOr<double> RewardScore(const TinyLM& model, const TokenSeq& prompt,
                                   const TokenSeq& response) {
  Tape tape(false);
  BoundParams p(tape, model.params(), nullptr);
  Var r = RewardScoreOnTape(model.config(), p, prompt, response);
  RETURN_IF_ERROR(tape.status());
  return r.value().item();
}

absl::StatusOr<Generation> Generate(const TinyLM& model, const TokenSeq& prompt,
                                    const GenerationConfig& gen, Rng& rng) {
  const TinyLMConfig& config = model.config();
  if (gen.max_new < 1) return absl::InvalidArgumentError("Generate: max_new must be >= 1");
  if (prompt.empty()) return absl::InvalidArgumentError("Generate: empty prompt");
  RETURN_IF_ERROR(CheckTokens(config, prompt));
  if (static_cast<int64_t>(prompt.size()) + gen.max_new > config.context_len) {
    return absl::InvalidArgumentError(absl::StrCat(
        "Generate: prompt length ", prompt.size(), " + max_new ", gen.max_new,
        " exceeds context_len ", config.context_len));
  }
  Generation out;
  TokenSeq tokens = prompt;
  const int v = config.vocab_size;
  std::vector<double> logp(v), weights(v);
  std::vector<int> order(v);
  for (int step = 0; step < gen.max_new; ++step) {
    Tape tape(false);
    BoundParams p(tape, model.params(), nullptr);
    Var hidden = Trunk(config, p, tokens);
    Var last = SliceRows(hidden, static_cast<int64_t>(tokens.size()) - 1, 1);
    Var lp = LogSoftmaxRows(Linear(p, last, "lm_head.w", "lm_head.b"));
    RETURN_IF_ERROR(tape.status());
    const Tensor& lpv = lp.value();
    for (int i = 0; i < v; ++i) logp[i] = lpv[i];

    int next = 0;
    if (gen.temperature <= 0.0 || gen.top_k == 1) {
      next = static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    } else {
      std::iota(order.begin(), order.end(), 0);
      int keep = v;
      if (gen.top_k > 0 && gen.top_k < v) {
        keep = gen.top_k;
        std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                          [&](int a, int b) { return logp[a] > logp[b] || (logp[a] == logp[b] && a < b); });
        std::sort(order.begin(), order.begin() + keep);
      }
      double mx = -INFINITY;
      for (int i = 0; i < keep; ++i) mx = std::max(mx, logp[order[i]]);
      double total = 0.0;
      for (int i = 0; i < keep; ++i) {
        weights[i] = std::exp((logp[order[i]] - mx) / gen.temperature);
        total += weights[i];
      }
      const double u = rng.Uniform() * total;
      double acc = 0.0;
      next = order[keep - 1];
      for (int i = 0; i < keep; ++i) {
        acc += weights[i];
        if (u < acc) {
          next = order[i];
          break;
        }
      }
    }
    out.tokens.push_back(next);
    out.logprobs.push_back(logp[next]);
    tokens.push_back(next);
    if (gen.stop_at_eos && next == kEosToken) break;
  }
  return out;
}

std::vector<std::string> HeadParams(const std::string& head) {
  return {head + ".w", head + ".b"};
}

absl::StatusOr<std::vector<std::string>> TrainableParams(
    const TinyLM& model, TrainMode mode, const std::set<std::string>& heads) {
  if (mode == TrainMode::kFull) return model.params().names();
  if (model.config().adapter_rank == 0) {
    return absl::InvalidArgumentError(
        "adapters_only training requires adapter_rank > 0");
  }
  std::vector<std::string> names;
  for (const std::string& m : model.AdaptedMatrices()) {
    names.push_back(TinyLM::AdapterA(m));
    names.push_back(TinyLM::AdapterB(m));
  }
  for (const std::string& head : heads) {
    for (std::string& n : HeadParams(head)) {
      if (!model.params().Contains(n)) {
        return absl::InvalidArgumentError(absl::StrCat("unknown head ", head));
      }
      names.push_back(std::move(n));
    }
  }
  return names;
}

}  // namespace dpalign

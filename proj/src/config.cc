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

#include "dpalign/config.h"

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <utility>

#include "absl/status/status.h"
#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "absl/strings/strip.h"
#include "dpalign/checkpoint.h"
#include "dpalign/status_macros.h"

namespace dpalign {

absl::StatusOr<PipelineKind> ParsePipelineKind(const std::string& s) {
  if (s == "lexicon") return PipelineKind::kLexicon;
  if (s == "preference") return PipelineKind::kPreference;
  return absl::InvalidArgumentError("pipeline kind must be lexicon or preference, got '" + s + "'");
}

const char* PipelineKindName(PipelineKind kind) {
  return kind == PipelineKind::kLexicon ? "lexicon" : "preference";
}

namespace {

absl::StatusOr<TrainMode> ParseTrainMode(const std::string& s) {
  if (s == "full") return TrainMode::kFull;
  if (s == "adapters") return TrainMode::kAdaptersOnly;
  return absl::InvalidArgumentError("train_mode must be full or adapters, got '" + s + "'");
}
const char* TrainModeName(TrainMode m) { return m == TrainMode::kFull ? "full" : "adapters"; }

const char* LrScheduleName(LrSchedule s) {
  switch (s) {
    case LrSchedule::kConstant: return "constant";
    case LrSchedule::kCosine: return "cosine";
    case LrSchedule::kLinear: return "linear";
  }
  return "constant";
}

absl::StatusOr<TiePolicy> ParseTiePolicy(const std::string& s) {
  if (s == "coin") return TiePolicy::kCoin;
  if (s == "resample") return TiePolicy::kResample;
  return absl::InvalidArgumentError("ties must be coin or resample, got '" + s + "'");
}
const char* TiePolicyName(TiePolicy t) { return t == TiePolicy::kCoin ? "coin" : "resample"; }

absl::Status ParseValue(const std::string& v, int64_t& out) {
  if (!absl::SimpleAtoi(v, &out)) return absl::InvalidArgumentError("expected an integer");
  return absl::OkStatus();
}
absl::Status ParseValue(const std::string& v, int& out) {
  if (!absl::SimpleAtoi(v, &out)) return absl::InvalidArgumentError("expected an integer");
  return absl::OkStatus();
}
absl::Status ParseValue(const std::string& v, uint64_t& out) {
  if (!absl::SimpleAtoi(v, &out)) return absl::InvalidArgumentError("expected an unsigned integer");
  return absl::OkStatus();
}
absl::Status ParseValue(const std::string& v, double& out) {
  if (!absl::SimpleAtod(v, &out) || !std::isfinite(out)) {
    return absl::InvalidArgumentError("expected a finite number");
  }
  return absl::OkStatus();
}
absl::Status ParseValue(const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
  } else if (v == "false" || v == "0") {
    out = false;
  } else {
    return absl::InvalidArgumentError("expected true or false");
  }
  return absl::OkStatus();
}
absl::Status ParseValue(const std::string& v, std::string& out) {
  out = v;
  return absl::OkStatus();
}

struct Field {
  std::function<absl::Status(RunConfig&, const std::string&)> set;
  // Null for keys that are not echoed (the privacy.* defaults).
  std::function<nlohmann::json(RunConfig&)> get;
};

template <typename T>
Field Scalar(std::function<T&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& v) { return ParseValue(v, ref(c)); },
          [ref](RunConfig& c) { return nlohmann::json(ref(c)); }};
}

template <typename T>
Field Enum(std::function<T&(RunConfig&)> ref,
           absl::StatusOr<T> (*parse)(const std::string&), const char* (*name)(T)) {
  return {[ref, parse](RunConfig& c, const std::string& v) -> absl::Status {
            ASSIGN_OR_RETURN(ref(c), parse(v));
            return absl::OkStatus();
          },
          [ref, name](RunConfig& c) { return nlohmann::json(name(ref(c))); }};
}

#define DPALIGN_REF(type, expr) \
  std::function<type&(RunConfig&)>([](RunConfig& c) -> type& { return c.expr; })

template <typename Stage>
void AddStageKeys(std::map<std::string, Field>& f, const std::string& p,
                  Stage& (*stage)(RunConfig&)) {
  auto ref = [stage]<typename T>(T Stage::*member) {
    return std::function<T&(RunConfig&)>(
        [stage, member](RunConfig& c) -> T& { return stage(c).*member; });
  };
  auto opt = [stage]<typename T>(T AdamWConfig::*member) {
    return std::function<T&(RunConfig&)>(
        [stage, member](RunConfig& c) -> T& { return stage(c).optimizer.*member; });
  };
  auto priv = [stage]<typename T>(T PrivacyOptions::*member) {
    return std::function<T&(RunConfig&)>(
        [stage, member](RunConfig& c) -> T& { return stage(c).privacy.*member; });
  };
  f[p + "epochs"] = Scalar(ref(&Stage::epochs));
  f[p + "batch_size"] = Scalar(ref(&Stage::batch_size));
  f[p + "poisson_nonprivate"] = Scalar(ref(&Stage::poisson_nonprivate));
  f[p + "train_mode"] = Enum(ref(&Stage::train_mode), &ParseTrainMode, &TrainModeName);
  f[p + "lr"] = Scalar(opt(&AdamWConfig::lr));
  f[p + "beta1"] = Scalar(opt(&AdamWConfig::beta1));
  f[p + "beta2"] = Scalar(opt(&AdamWConfig::beta2));
  f[p + "weight_decay"] = Scalar(opt(&AdamWConfig::weight_decay));
  f[p + "schedule"] = Enum(opt(&AdamWConfig::schedule), &ParseLrSchedule, &LrScheduleName);
  f[p + "privacy.mode"] = Enum(priv(&PrivacyOptions::mode), &ParsePrivacyMode, &PrivacyModeName);
  f[p + "privacy.epsilon"] = Scalar(priv(&PrivacyOptions::target_epsilon));
  f[p + "privacy.delta"] = Scalar(priv(&PrivacyOptions::delta));
  f[p + "privacy.noise_multiplier"] = Scalar(priv(&PrivacyOptions::noise_multiplier));
  f[p + "privacy.clip_norm"] = Scalar(priv(&PrivacyOptions::clip_norm));
  f[p + "privacy.diagnostic_zero_noise"] =
      Scalar(priv(&PrivacyOptions::diagnostic_zero_noise));
}

StageConfig& SftStage(RunConfig& c) { return c.sft; }
StageConfig& RewardStage(RunConfig& c) { return c.reward; }
PPOConfig& PpoStage(RunConfig& c) { return c.ppo; }

const std::map<std::string, Field>& Fields() {
  static const auto* fields = [] {
    auto* f = new std::map<std::string, Field>();
    auto& m = *f;
    m["seed"] = Scalar(DPALIGN_REF(uint64_t, seed));
    m["pipeline.kind"] = Enum(DPALIGN_REF(PipelineKind, kind), &ParsePipelineKind,
                              &PipelineKindName);
    m["output_dir"] = {[](RunConfig& c, const std::string& v) { return ParseValue(v, c.output_dir); },
                       nullptr};
    m["threads"] = Scalar(DPALIGN_REF(int, threads));
    m["allow_mixed"] = Scalar(DPALIGN_REF(bool, allow_mixed));
    m["corpus.path"] = Scalar(DPALIGN_REF(std::string, corpus_path));
    m["corpus.size"] = Scalar(DPALIGN_REF(int64_t, corpus.size));
    m["corpus.lexicon_overlap"] = Scalar(DPALIGN_REF(double, corpus.lexicon_overlap));
    m["corpus.prompt_words"] = Scalar(DPALIGN_REF(int, corpus.prompt_words));
    m["test.size"] = Scalar(DPALIGN_REF(int64_t, test_size));
    m["partition.fractions"] = {
        [](RunConfig& c, const std::string& v) -> absl::Status {
          std::vector<std::string> parts = absl::StrSplit(v, ',');
          if (parts.size() != 3) {
            return absl::InvalidArgumentError("expected three comma-separated fractions");
          }
          for (int i = 0; i < 3; ++i) {
            RETURN_IF_ERROR(ParseValue(std::string(absl::StripAsciiWhitespace(parts[i])),
                                       c.fractions[i]));
          }
          c.fractions_set = true;
          return absl::OkStatus();
        },
        [](RunConfig& c) { return nlohmann::json(c.fractions); }};
    m["partition.manifest"] = Scalar(DPALIGN_REF(std::string, manifest_path));
    m["model.init"] = Scalar(DPALIGN_REF(std::string, model_init));
    m["model.context_len"] = Scalar(DPALIGN_REF(int, model.context_len));
    m["model.d_model"] = Scalar(DPALIGN_REF(int, model.d_model));
    m["model.n_layers"] = Scalar(DPALIGN_REF(int, model.n_layers));
    m["model.n_heads"] = Scalar(DPALIGN_REF(int, model.n_heads));
    m["model.adapter_rank"] = Scalar(DPALIGN_REF(int, model.adapter_rank));
    m["model.seed"] = Scalar(DPALIGN_REF(uint64_t, model.seed));

    m["sft.enabled"] = Scalar(DPALIGN_REF(bool, sft_enabled));
    AddStageKeys(m, "sft.", &SftStage);
    AddStageKeys(m, "reward.", &RewardStage);
    m["reward.heldout_fraction"] = Scalar(DPALIGN_REF(double, reward.heldout_fraction));
    m["prefs.max_new"] = Scalar(DPALIGN_REF(int, prefs.generation.max_new));
    m["prefs.temperature"] = Scalar(DPALIGN_REF(double, prefs.generation.temperature));
    m["prefs.top_k"] = Scalar(DPALIGN_REF(int, prefs.generation.top_k));
    m["prefs.ties"] = Enum(DPALIGN_REF(TiePolicy, prefs.ties), &ParseTiePolicy, &TiePolicyName);
    m["prefs.max_resamples"] = Scalar(DPALIGN_REF(int, prefs.max_resamples));
    m["oracle.noise_rate"] = Scalar(DPALIGN_REF(double, oracle_noise_rate));

    m["ppo.enabled"] = Scalar(DPALIGN_REF(bool, ppo_enabled));
    AddStageKeys(m, "ppo.", &PpoStage);
    m["ppo.minibatch_size"] = Scalar(DPALIGN_REF(int64_t, ppo.minibatch_size));
    m["ppo.ppo_epochs"] = Scalar(DPALIGN_REF(int, ppo.ppo_epochs));
    m["ppo.kl_coef"] = Scalar(DPALIGN_REF(double, ppo.kl_coef));
    m["ppo.clip_range"] = Scalar(DPALIGN_REF(double, ppo.clip_range));
    m["ppo.value_coef"] = Scalar(DPALIGN_REF(double, ppo.value_coef));
    m["ppo.gamma"] = Scalar(DPALIGN_REF(double, ppo.gamma));
    m["ppo.lambda"] = Scalar(DPALIGN_REF(double, ppo.lambda));
    m["ppo.max_new"] = Scalar(DPALIGN_REF(int, ppo.generation.max_new));
    m["ppo.temperature"] = Scalar(DPALIGN_REF(double, ppo.generation.temperature));
    m["ppo.top_k"] = Scalar(DPALIGN_REF(int, ppo.generation.top_k));

    m["eval.max_new"] = Scalar(DPALIGN_REF(int, eval_generation.max_new));
    m["eval.temperature"] = Scalar(DPALIGN_REF(double, eval_generation.temperature));
    m["eval.top_k"] = Scalar(DPALIGN_REF(int, eval_generation.top_k));
    m["eval.reward_model"] = Scalar(DPALIGN_REF(std::string, eval_reward_model));

    // Defaults for all three stages.
    for (const char* key : {"mode", "epsilon", "delta", "noise_multiplier", "clip_norm",
                            "diagnostic_zero_noise"}) {
      const std::string k = key;
      m["privacy." + k] = {[k](RunConfig& c, const std::string& v) -> absl::Status {
                             const auto& all = Fields();
                             for (const char* s : {"sft.", "reward.", "ppo."}) {
                               RETURN_IF_ERROR(all.at(s + ("privacy." + k)).set(c, v));
                             }
                             return absl::OkStatus();
                           },
                           nullptr};
    }
    return f;
  }();
  return *fields;
}

#undef DPALIGN_REF

struct Line {
  int number;  // 0 for overrides
  std::string key;
  std::string value;
};

std::string Where(int number) {
  return number > 0 ? absl::StrCat("line ", number, ": ") : std::string("override: ");
}

absl::Status SplitLine(std::string_view raw, int number, std::vector<Line>& out) {
  std::string_view text = raw;
  if (size_t hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
  std::string body(absl::StripAsciiWhitespace(std::string(text)));
  if (body.empty()) return absl::OkStatus();
  const size_t eq = body.find('=');
  if (eq == std::string::npos) {
    return absl::InvalidArgumentError(Where(number) + "expected key=value, got '" + body + "'");
  }
  Line line{number, std::string(absl::StripAsciiWhitespace(body.substr(0, eq))),
            std::string(absl::StripAsciiWhitespace(body.substr(eq + 1)))};
  if (!Fields().contains(line.key)) {
    return absl::InvalidArgumentError(Where(number) + "unknown key '" + line.key + "'");
  }
  out.push_back(std::move(line));
  return absl::OkStatus();
}

absl::Status ValidatePrivacy(const std::string& stage, const PrivacyOptions& p) {
  if (p.mode != PrivacyMode::kDp) return absl::OkStatus();
  const bool has_target = p.target_epsilon > 0;
  const bool has_sigma = p.noise_multiplier > 0 || p.diagnostic_zero_noise;
  if (has_target == has_sigma) {
    return absl::InvalidArgumentError(
        stage + ": dp needs exactly one of privacy.epsilon or privacy.noise_multiplier");
  }
  if (!(p.clip_norm > 0)) return absl::InvalidArgumentError(stage + ": clip_norm must be > 0");
  if (!(p.delta >= 0 && p.delta < 1)) {
    return absl::InvalidArgumentError(stage + ": delta must be in [0, 1)");
  }
  return absl::OkStatus();
}

absl::Status ValidateStage(const std::string& stage, const StageConfig& s) {
  if (s.epochs < 1 || s.batch_size < 1) {
    return absl::InvalidArgumentError(stage + ": epochs and batch_size must be >= 1");
  }
  if (!(s.optimizer.lr > 0)) return absl::InvalidArgumentError(stage + ": lr must be > 0");
  return ValidatePrivacy(stage, s.privacy);
}

}  // namespace

RunConfig::RunConfig() {
  model.context_len = 96;
  model.d_model = 32;
  model.n_layers = 2;
  model.n_heads = 2;
  model.adapter_rank = 2;
  sft.batch_size = 16;
  sft.optimizer.lr = 1e-3;
  reward.batch_size = 32;
  reward.epochs = 3;
  reward.train_mode = TrainMode::kAdaptersOnly;
  reward.optimizer.lr = 3e-2;
  reward.optimizer.schedule = LrSchedule::kCosine;
  prefs.generation.max_new = 24;
  prefs.ties = TiePolicy::kResample;
  ppo.optimizer.lr = 1e-3;
}

std::array<bool, 3> RunConfig::StagesRun() const {
  return {sft_enabled && fractions[0] > 0, kind == PipelineKind::kPreference,
          ppo_enabled && fractions[2] > 0};
}

absl::Status RunConfig::Validate() const {
  if (threads < 1) return absl::InvalidArgumentError("threads must be >= 1");
  if (test_size < 1) return absl::InvalidArgumentError("test.size must be >= 1");
  if (corpus_path.empty()) RETURN_IF_ERROR(corpus.Validate());
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) return absl::InvalidArgumentError("partition fractions must be >= 0");
    total += f;
  }
  if (total > 1 + 1e-12) {
    return absl::InvalidArgumentError(
        absl::StrCat("partition fractions sum to ", total, " > 1"));
  }
  if (model_init.empty()) RETURN_IF_ERROR(model.Validate());
  SyntheticOracle oracle = DefaultOracle(oracle_noise_rate);
  RETURN_IF_ERROR(oracle.Validate());

  const std::array<bool, 3> run = StagesRun();
  if (run[1] && !(fractions[1] > 0)) {
    return absl::InvalidArgumentError("the preference pipeline needs a reward partition");
  }
  if (run[0]) RETURN_IF_ERROR(ValidateStage("sft", sft));
  if (run[1]) {
    RETURN_IF_ERROR(ValidateStage("reward", reward));
    if (!(reward.heldout_fraction > 0 && reward.heldout_fraction < 1)) {
      return absl::InvalidArgumentError("reward.heldout_fraction must be in (0, 1)");
    }
    if (prefs.generation.max_new < 1) return absl::InvalidArgumentError("prefs.max_new must be >= 1");
  }
  if (run[2]) {
    RETURN_IF_ERROR(ppo.Validate());
    RETURN_IF_ERROR(ValidatePrivacy("ppo", ppo.privacy));
    if (!(ppo.optimizer.lr > 0)) return absl::InvalidArgumentError("ppo: lr must be > 0");
  }
  if (eval_generation.max_new < 1) return absl::InvalidArgumentError("eval.max_new must be >= 1");

  const std::array<PrivacyMode, 3> modes = {sft.privacy.mode, reward.privacy.mode,
                                            ppo.privacy.mode};
  std::set<PrivacyMode> used;
  for (int i = 0; i < 3; ++i) {
    if (run[i]) used.insert(modes[i]);
  }
  if (used.size() > 1 && !allow_mixed) {
    return absl::InvalidArgumentError(
        "stages mix dp and nonprivate modes; pass --allow-mixed to run anyway");
  }
  if (run[1] && reward.privacy.mode == PrivacyMode::kDp && eval_reward_model.empty()) {
    return absl::InvalidArgumentError(
        "a dp reward model cannot score the evaluation; set eval.reward_model to a "
        "non-private one");
  }
  return absl::OkStatus();
}

nlohmann::json RunConfig::ToJson() const {
  RunConfig copy = *this;
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, field] : Fields()) {
    if (field.get) j[key] = field.get(copy);
  }
  return j;
}

std::vector<std::string> RunConfigKeys() {
  std::vector<std::string> keys;
  for (const auto& [key, field] : Fields()) keys.push_back(key);
  return keys;
}

absl::StatusOr<RunConfig> ParseRunConfig(std::string_view text,
                                         const std::vector<std::string>& overrides) {
  std::vector<Line> lines;
  int number = 0;
  std::set<std::string> seen;
  for (absl::string_view piece : absl::StrSplit(absl::string_view(text.data(), text.size()), '\n')) {
    const std::string_view raw(piece.data(), piece.size());
    ++number;
    const size_t before = lines.size();
    RETURN_IF_ERROR(SplitLine(raw, number, lines));
    if (lines.size() > before && !seen.insert(lines.back().key).second) {
      return absl::InvalidArgumentError(Where(number) + "duplicate key '" + lines.back().key + "'");
    }
  }
  for (const std::string& o : overrides) RETURN_IF_ERROR(SplitLine(o, 0, lines));

  RunConfig config;
  // Kind first so kind-dependent defaults precede explicit settings.
  auto apply = [&](const Line& line) -> absl::Status {
    absl::Status s = Fields().at(line.key).set(config, line.value);
    if (!s.ok()) {
      return absl::InvalidArgumentError(absl::StrCat(Where(line.number), line.key, ": ",
                                                     std::string(s.message())));
    }
    return absl::OkStatus();
  };
  for (const Line& line : lines) {
    if (line.key == "pipeline.kind") RETURN_IF_ERROR(apply(line));
  }
  if (config.kind == PipelineKind::kPreference) config.fractions = {0.25, 0.35, 0.40};
  // Global privacy defaults, then everything else, so stage keys win.
  for (const Line& line : lines) {
    if (line.key.starts_with("privacy.")) RETURN_IF_ERROR(apply(line));
  }
  for (const Line& line : lines) {
    if (line.key != "pipeline.kind" && !line.key.starts_with("privacy.")) {
      RETURN_IF_ERROR(apply(line));
    }
  }
  for (uint64_t* seed : {&config.sft.seed, &config.reward.seed, &config.ppo.seed}) {
    *seed = config.seed;
  }
  for (int* threads : {&config.sft.num_threads, &config.reward.num_threads,
                       &config.ppo.num_threads}) {
    *threads = config.threads;
  }
  RETURN_IF_ERROR(config.Validate());
  return config;
}

absl::StatusOr<RunConfig> LoadRunConfig(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  ASSIGN_OR_RETURN(std::string text, ReadFile(path));
  return ParseRunConfig(text, overrides);
}

}  // namespace dpalign

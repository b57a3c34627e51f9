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

#include "dpalign/stages.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {

nlohmann::json EpsilonJson(double epsilon) {
  if (std::isinf(epsilon)) return "inf";
  return epsilon;
}

absl::StatusOr<ResolvedPrivacy> ResolvePrivacy(const PrivacyOptions& options,
                                               int64_t dataset_size, double sampling_prob,
                                               int64_t steps) {
  if (dataset_size < 1) return absl::InvalidArgumentError("stage dataset is empty");
  if (steps < 1) return absl::InvalidArgumentError(absl::StrCat("steps must be >= 1, got ", steps));
  ResolvedPrivacy r;
  r.dp.mode = options.mode;
  r.dp.clip_norm = options.clip_norm;
  r.dp.sampling_prob = sampling_prob;
  r.dp.expected_steps = steps;
  r.delta = options.delta > 0 ? options.delta : 1.0 / static_cast<double>(dataset_size);
  if (options.mode == PrivacyMode::kNonprivate) {
    if (options.target_epsilon > 0 || options.noise_multiplier > 0) {
      return absl::InvalidArgumentError("epsilon or sigma given for a nonprivate stage");
    }
    RETURN_IF_ERROR(r.dp.Validate());
    return r;
  }
  if (options.diagnostic_zero_noise) {
    if (options.target_epsilon > 0 || options.noise_multiplier > 0) {
      return absl::InvalidArgumentError("diagnostic_zero_noise excludes epsilon and sigma");
    }
    r.dp.diagnostic_zero_noise = true;
    RETURN_IF_ERROR(r.dp.Validate());
    return r;
  }
  if ((options.target_epsilon > 0) == (options.noise_multiplier > 0)) {
    return absl::InvalidArgumentError(
        "dp stage needs exactly one of a target epsilon or an explicit sigma");
  }
  if (!(r.delta > 0 && r.delta < 1)) {
    return absl::InvalidArgumentError(absl::StrCat("delta must be in (0, 1), got ", r.delta));
  }
  if (options.target_epsilon > 0) {
    ASSIGN_OR_RETURN(r.dp.noise_multiplier,
                     CalibrateSigma({options.target_epsilon, r.delta}, sampling_prob, steps));
  } else {
    r.dp.noise_multiplier = options.noise_multiplier;
  }
  RETURN_IF_ERROR(r.dp.Validate());
  ASSIGN_OR_RETURN(EpsilonResult e,
                   ComputeEpsilon({r.dp.noise_multiplier, sampling_prob, steps}, r.delta));
  r.epsilon = e.epsilon;
  r.rdp_order = e.order;
  r.certified = true;
  return r;
}

Var SftLoss(const TinyLMConfig& config, BoundParams& params, const TokenSeq& prompt,
            const TokenSeq& target) {
  if (target.empty()) {
    return params.tape().Fail(absl::InvalidArgumentError("SFT example has an empty target"));
  }
  HeadVars h = ForwardHeadsOnTape(config, params, prompt, target);
  return Scale(Sum(h.logprobs), -1.0 / static_cast<double>(target.size()));
}

absl::StatusOr<double> SftLossValue(const TinyLM& model, const SftExample& example) {
  if (example.target.empty()) return absl::InvalidArgumentError("empty SFT target");
  Tape tape(false);
  BoundParams bound(tape, model.params(), nullptr);
  Var loss = SftLoss(model.config(), bound, EncodePrompt(example.prompt),
                     SftTargetTokens(example));
  RETURN_IF_ERROR(tape.status());
  return loss.value().item();
}

Var PreferenceLoss(const TinyLMConfig& config, BoundParams& params,
                   const PreferenceRecord& record) {
  const TokenSeq prompt = EncodePrompt(record.prompt);
  Var chosen = RewardScoreOnTape(config, params, prompt, EncodeBytes(record.chosen()));
  Var rejected = RewardScoreOnTape(config, params, prompt, EncodeBytes(record.rejected()));
  return Sum(Softplus(Sub(rejected, chosen)));
}

absl::StatusOr<double> PreferenceLossValue(const TinyLM& model,
                                           std::span<const PreferenceRecord> batch) {
  if (batch.empty()) return absl::InvalidArgumentError("preference batch is empty");
  double total = 0.0;
  for (const PreferenceRecord& r : batch) {
    Tape tape(false);
    BoundParams bound(tape, model.params(), nullptr);
    Var loss = PreferenceLoss(model.config(), bound, r);
    RETURN_IF_ERROR(tape.status());
    total += loss.value().item();
  }
  return total / static_cast<double>(batch.size());
}

absl::StatusOr<double> PairwiseAccuracy(const TinyLM& model,
                                        std::span<const PreferenceRecord> records) {
  if (records.empty()) return absl::InvalidArgumentError("no records to score");
  double correct = 0.0;
  for (const PreferenceRecord& r : records) {
    const TokenSeq prompt = EncodePrompt(r.prompt);
    ASSIGN_OR_RETURN(double chosen, RewardScore(model, prompt, EncodeBytes(r.chosen())));
    ASSIGN_OR_RETURN(double rejected, RewardScore(model, prompt, EncodeBytes(r.rejected())));
    if (chosen > rejected) {
      correct += 1.0;
    } else if (chosen == rejected) {
      correct += 0.5;
    }
  }
  return correct / static_cast<double>(records.size());
}

bool IsHeldOut(const PreferenceRecord& record, uint64_t seed, double fraction) {
  const std::string key =
      absl::StrCat(record.prompt, "\t", record.y0, "\t", record.y1, "\t", record.preferred);
  const uint64_t h = Fnv1a64(key, Fnv1a64("heldout", seed));
  return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

absl::StatusOr<TrainLoopResult> RunTrainingLoop(ParameterSet& params,
                                                const TrainableSet& trainable, int64_t n,
                                                const ExampleLoss& loss, const DPConfig& dp,
                                                const TrainLoopConfig& config,
                                                Rng& sampling_rng, Rng& noise_rng,
                                                const std::string& stage,
                                                const MetricsSink& sink) {
  if (n < 1) return absl::InvalidArgumentError("training set is empty");
  if (config.batch_size < 1 || config.batch_size > n) {
    return absl::InvalidArgumentError(absl::StrCat("batch size must be in [1, ", n, "], got ",
                                                   config.batch_size));
  }
  RETURN_IF_ERROR(dp.Validate());
  const bool poisson = dp.mode == PrivacyMode::kDp || config.poisson_nonprivate;
  const double q = static_cast<double>(config.batch_size) / static_cast<double>(n);
  AdamWConfig opt_config = config.optimizer;
  opt_config.total_steps = config.steps;
  AdamW optimizer(opt_config, trainable);

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  int64_t cursor = n;

  TrainLoopResult result;
  double clipped_total = 0.0;
  int64_t clipped_steps = 0;
  for (int64_t step = 0; step < config.steps; ++step) {
    std::vector<int64_t> batch;
    if (poisson) {
      ASSIGN_OR_RETURN(batch, PoissonSample(n, q, sampling_rng));
    } else {
      if (cursor + config.batch_size > n) {
        for (int64_t i = n - 1; i > 0; --i) {
          std::swap(order[i], order[sampling_rng.UniformInt(i + 1)]);
        }
        cursor = 0;
      }
      batch.assign(order.begin() + cursor, order.begin() + cursor + config.batch_size);
      cursor += config.batch_size;
    }
    ASSIGN_OR_RETURN(StepTelemetry t, TrainStep(dp, optimizer, params, batch, loss, noise_rng,
                                                config.num_threads));
    ++result.steps;
    if (t.skipped) {
      ++result.skipped_steps;
    } else {
      result.final_loss = t.mean_loss;
      if (dp.mode == PrivacyMode::kDp) {
        clipped_total += t.fraction_clipped;
        ++clipped_steps;
      }
    }
    if (sink) {
      nlohmann::json rec = {{"stage", stage},          {"step", t.step},
                            {"batch_size", t.batch_size}, {"skipped", t.skipped},
                            {"lr", t.lr},              {"loss", t.mean_loss}};
      if (dp.mode == PrivacyMode::kDp) {
        rec["fraction_clipped"] = t.fraction_clipped;
        rec["norm_histogram"] = t.norm_histogram;
      }
      sink(rec);
    }
  }
  if (clipped_steps > 0) result.mean_fraction_clipped = clipped_total / clipped_steps;
  return result;
}

nlohmann::json StageReport::ToJson() const {
  nlohmann::json j = {{"stage", stage},
                      {"privacy", PrivacyModeName(mode)},
                      {"epsilon", EpsilonJson(epsilon)},
                      {"delta", delta},
                      {"noise_multiplier", noise_multiplier},
                      {"sampling_prob", sampling_prob},
                      {"rdp_order", rdp_order},
                      {"dp_certified", certified},
                      {"dataset_size", dataset_size},
                      {"steps", steps},
                      {"skipped_steps", skipped_steps},
                      {"final_train_loss", final_train_loss},
                      {"mean_fraction_clipped", mean_fraction_clipped}};
  if (heldout_accuracy) {
    j["heldout_accuracy"] = *heldout_accuracy;
    j["heldout_size"] = heldout_size;
  }
  if (initial_mean_reward) j["initial_mean_reward"] = *initial_mean_reward;
  if (final_mean_reward) j["final_mean_reward"] = *final_mean_reward;
  for (const auto& [key, value] : details.items()) j[key] = value;
  return j;
}

void StampPrivacyMetadata(const StageReport& report, TinyLM& model) {
  model.metadata()[kMetaStage] = report.stage;
  model.metadata()[kMetaDpCertified] = report.certified ? "true" : "false";
  model.metadata()[kMetaEpsilon] = EpsilonJson(report.epsilon).dump();
  model.metadata()[kMetaDelta] = nlohmann::json(report.delta).dump();
}

namespace {

int64_t StepsFor(const StageConfig& config, int64_t n) {
  return config.epochs * std::max<int64_t>(1, n / std::max<int64_t>(config.batch_size, 1));
}

absl::Status ValidateStageConfig(const StageConfig& config, int64_t n) {
  if (config.epochs < 1) return absl::InvalidArgumentError("epochs must be >= 1");
  if (config.batch_size < 1 || config.batch_size > n) {
    return absl::InvalidArgumentError(
        absl::StrCat("batch size ", config.batch_size, " not in [1, ", n, "]"));
  }
  return absl::OkStatus();
}

void FillPrivacy(const ResolvedPrivacy& p, StageReport* report) {
  report->mode = p.dp.mode;
  report->epsilon = p.epsilon;
  report->delta = p.delta;
  report->noise_multiplier = p.dp.noise_multiplier;
  report->sampling_prob = p.dp.sampling_prob;
  report->rdp_order = p.rdp_order;
  report->certified = p.certified;
}

// Trains `model` in place on examples [0, n) with the stage's settings.
absl::StatusOr<TrainLoopResult> TrainStage(TinyLM& model, const StageConfig& config,
                                           const std::set<std::string>& heads, int64_t n,
                                           const ExampleLoss& loss,
                                           const std::string& stage, StageReport* report,
                                           const MetricsSink& sink) {
  RETURN_IF_ERROR(ValidateStageConfig(config, n));
  const int64_t steps = StepsFor(config, n);
  const double q = static_cast<double>(config.batch_size) / static_cast<double>(n);
  ASSIGN_OR_RETURN(ResolvedPrivacy privacy, ResolvePrivacy(config.privacy, n, q, steps));
  ASSIGN_OR_RETURN(std::vector<std::string> names,
                   TrainableParams(model, config.train_mode, heads));
  ASSIGN_OR_RETURN(TrainableSet trainable, TrainableSet::Create(model.params(), names));
  TrainLoopConfig loop{steps, config.batch_size, config.poisson_nonprivate, config.optimizer,
                       config.num_threads};
  Rng sampling = Rng::Substream(config.seed, stage + ".sampling");
  Rng noise = Rng::Substream(config.seed, stage + ".noise");
  ASSIGN_OR_RETURN(TrainLoopResult result,
                   RunTrainingLoop(model.mutable_params(), trainable, n, loss, privacy.dp, loop,
                                   sampling, noise, stage, sink));
  report->stage = stage;
  report->dataset_size = n;
  report->steps = result.steps;
  report->skipped_steps = result.skipped_steps;
  report->final_train_loss = result.final_loss;
  report->mean_fraction_clipped = result.mean_fraction_clipped;
  FillPrivacy(privacy, report);
  return result;
}

}  // namespace

absl::StatusOr<TinyLM> RunSftStage(const TinyLM& init, const std::vector<SftExample>& data,
                                   const StageConfig& config, StageReport* report,
                                   const MetricsSink& sink) {
  const TinyLMConfig& mc = init.config();
  std::vector<TokenSeq> prompts, targets;
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].target.empty()) {
      return absl::InvalidArgumentError(absl::StrCat("SFT example ", i, " has an empty target"));
    }
    prompts.push_back(EncodePrompt(data[i].prompt));
    targets.push_back(SftTargetTokens(data[i]));
    if (static_cast<int64_t>(prompts.back().size() + targets.back().size()) > mc.context_len + 1) {
      return absl::InvalidArgumentError(absl::StrCat(
          "SFT example ", i, " has ", prompts.back().size() + targets.back().size() - 1,
          " positions, context_len is ", mc.context_len));
    }
  }
  TinyLM model = init;
  ExampleLoss loss = [&](BoundParams& p, int64_t i) {
    return SftLoss(mc, p, prompts[i], targets[i]);
  };
  StageReport local;
  StageReport* out = report ? report : &local;
  RETURN_IF_ERROR(TrainStage(model, config, {}, static_cast<int64_t>(data.size()), loss, "sft",
                             out, sink)
                      .status());
  StampPrivacyMetadata(*out, model);
  return model;
}

absl::StatusOr<TinyLM> RunRewardStage(const TinyLM& init,
                                      const std::vector<PreferenceRecord>& data,
                                      const StageConfig& config, StageReport* report,
                                      const MetricsSink& sink) {
  std::vector<PreferenceRecord> train, heldout;
  for (const PreferenceRecord& r : data) {
    if (r.y0 == r.y1) return absl::InvalidArgumentError("degenerate preference pair");
    (IsHeldOut(r, config.seed, config.heldout_fraction) ? heldout : train).push_back(r);
  }
  if (train.empty()) return absl::InvalidArgumentError("no training preference records");
  TinyLM model = init;
  const TinyLMConfig& mc = init.config();
  ExampleLoss loss = [&](BoundParams& p, int64_t i) { return PreferenceLoss(mc, p, train[i]); };
  StageReport local;
  StageReport* out = report ? report : &local;
  RETURN_IF_ERROR(TrainStage(model, config, {"reward_head"},
                             static_cast<int64_t>(train.size()), loss, "reward", out, sink)
                      .status());
  if (!heldout.empty()) {
    ASSIGN_OR_RETURN(double acc, PairwiseAccuracy(model, heldout));
    out->heldout_accuracy = acc;
    out->heldout_size = static_cast<int64_t>(heldout.size());
  }
  StampPrivacyMetadata(*out, model);
  return model;
}

}  // namespace dpalign

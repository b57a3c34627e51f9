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

#include "dpalign/pipeline.h"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <utility>

#include "absl/status/status.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "dpalign/checkpoint.h"
#include "dpalign/datasets.h"
#include "dpalign/stages.h"
#include "dpalign/status_macros.h"
#include "dpalign/tokenizer.h"

namespace dpalign {

namespace {

std::string Hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

}  // namespace

std::string CorpusHash(const std::vector<CorpusRecord>& corpus) {
  return Hex64(Fnv1a64(FormatCorpus(corpus)));
}

std::array<int64_t, kNumPartitions> PartitionManifest::sizes() const {
  std::array<int64_t, kNumPartitions> out;
  for (int k = 0; k < kNumPartitions; ++k) out[k] = static_cast<int64_t>(ids[k].size());
  return out;
}

nlohmann::json PartitionManifest::ToJson() const {
  nlohmann::json parts = nlohmann::json::object();
  for (int k = 0; k < kNumPartitions; ++k) parts[kPartitionNames[k]] = ids[k];
  return {{"corpus_hash", corpus_hash}, {"corpus_size", corpus_size},
          {"seed", seed},               {"fractions", fractions},
          {"sizes", sizes()},           {"partitions", parts},
          {"disjoint", disjoint}};
}

absl::StatusOr<PartitionManifest> PartitionManifest::FromJson(const nlohmann::json& j) {
  PartitionManifest m;
  try {
    m.corpus_hash = j.at("corpus_hash").get<std::string>();
    m.corpus_size = j.at("corpus_size").get<int64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.fractions = j.at("fractions").get<std::array<double, kNumPartitions>>();
    for (int k = 0; k < kNumPartitions; ++k) {
      m.ids[k] = j.at("partitions").at(kPartitionNames[k]).get<std::vector<std::string>>();
    }
    m.disjoint = j.at("disjoint").get<bool>();
    if (j.contains("sizes") &&
        j.at("sizes").get<std::array<int64_t, kNumPartitions>>() != m.sizes()) {
      return absl::InvalidArgumentError("manifest sizes disagree with its id lists");
    }
  } catch (const nlohmann::json::exception& e) {
    return absl::InvalidArgumentError(absl::StrCat("malformed manifest: ", e.what()));
  }
  return m;
}

absl::StatusOr<Partitioned> PartitionCorpus(const std::vector<CorpusRecord>& corpus,
                                            const std::array<double, kNumPartitions>& fractions,
                                            uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0 && f <= 1)) {
      return absl::InvalidArgumentError(absl::StrCat("partition fraction ", f, " not in [0, 1]"));
    }
    total += f;
  }
  if (total > 1 + 1e-12) {
    return absl::InvalidArgumentError(absl::StrCat("partition fractions sum to ", total, " > 1"));
  }
  const int64_t n = static_cast<int64_t>(corpus.size());
  std::set<std::string> seen;
  for (const CorpusRecord& r : corpus) {
    if (!seen.insert(r.id).second) {
      return absl::InvalidArgumentError("duplicate corpus id '" + r.id + "'");
    }
  }
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::Substream(seed, "partition");
  for (int64_t i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.UniformInt(static_cast<uint64_t>(i) + 1)]);
  }

  Partitioned out;
  out.manifest.corpus_hash = CorpusHash(corpus);
  out.manifest.corpus_size = n;
  out.manifest.seed = seed;
  out.manifest.fractions = fractions;
  double cumulative = 0;
  int64_t begin = 0;
  for (int k = 0; k < kNumPartitions; ++k) {
    cumulative += fractions[k];
    const int64_t end = std::min<int64_t>(n, std::llround(cumulative * n));
    for (int64_t i = begin; i < end; ++i) {
      out.parts[k].push_back(corpus[order[i]]);
      out.manifest.ids[k].push_back(corpus[order[i]].id);
    }
    begin = std::max(begin, end);
  }
  std::vector<std::vector<std::string>> id_sets(out.manifest.ids.begin(), out.manifest.ids.end());
  out.manifest.disjoint = CertifyDisjoint(id_sets).ok();
  return out;
}

absl::StatusOr<DisjointnessCertificate> VerifyManifest(
    const PartitionManifest& manifest, const std::vector<CorpusRecord>& corpus) {
  if (!manifest.disjoint) {
    return absl::FailedPreconditionError("manifest is not marked disjoint");
  }
  if (manifest.corpus_size != static_cast<int64_t>(corpus.size()) ||
      manifest.corpus_hash != CorpusHash(corpus)) {
    return absl::FailedPreconditionError("manifest describes a different corpus");
  }
  std::set<std::string> corpus_ids;
  for (const CorpusRecord& r : corpus) corpus_ids.insert(r.id);
  for (int k = 0; k < kNumPartitions; ++k) {
    std::set<std::string> within;
    for (const std::string& id : manifest.ids[k]) {
      if (!corpus_ids.contains(id)) {
        return absl::FailedPreconditionError("manifest id '" + id + "' is not in the corpus");
      }
      if (!within.insert(id).second) {
        return absl::FailedPreconditionError(absl::StrCat(
            "id '", id, "' listed twice in partition ", kPartitionNames[k]));
      }
    }
  }
  return CertifyDisjoint(
      std::vector<std::vector<std::string>>(manifest.ids.begin(), manifest.ids.end()));
}

absl::StatusOr<std::array<std::vector<CorpusRecord>, kNumPartitions>> ApplyManifest(
    const PartitionManifest& manifest, const std::vector<CorpusRecord>& corpus) {
  std::map<std::string, const CorpusRecord*> by_id;
  for (const CorpusRecord& r : corpus) by_id[r.id] = &r;
  std::array<std::vector<CorpusRecord>, kNumPartitions> parts;
  for (int k = 0; k < kNumPartitions; ++k) {
    for (const std::string& id : manifest.ids[k]) {
      auto it = by_id.find(id);
      if (it == by_id.end()) {
        return absl::FailedPreconditionError("manifest id '" + id + "' is not in the corpus");
      }
      parts[k].push_back(*it->second);
    }
  }
  return parts;
}

std::string MeanCi::ToString() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", mean, half_width);
  return buf;
}

nlohmann::json MeanCi::ToJson() const {
  return {{"mean", mean}, {"ci_half_width", half_width}, {"n", n}};
}

absl::StatusOr<MeanCi> SummarizeMeanCi(std::span<const double> values) {
  if (values.empty()) return absl::InvalidArgumentError("no values to summarize");
  MeanCi out;
  out.n = static_cast<int64_t>(values.size());
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) {
    out.mean = values[0];
    return out;
  }
  double sum = 0;
  for (double v : values) sum += v;
  out.mean = sum / out.n;
  if (out.n > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.half_width = 1.96 * std::sqrt(ss / (out.n - 1)) / std::sqrt(static_cast<double>(out.n));
  }
  return out;
}

absl::StatusOr<EvalResult> EvalMeanReward(const TinyLM& policy,
                                          const std::vector<std::string>& prompts,
                                          const RewardFunction& reward,
                                          const GenerationConfig& generation, Rng& rng) {
  if (prompts.empty()) return absl::InvalidArgumentError("empty test set");
  EvalResult out;
  for (const std::string& p : prompts) {
    const TokenSeq prompt = EncodePrompt(p);
    ASSIGN_OR_RETURN(Generation g, Generate(policy, prompt, generation, rng));
    ASSIGN_OR_RETURN(double r, reward.Score(prompt, g.tokens));
    out.rewards.push_back(r);
    out.responses.push_back(std::move(g.tokens));
  }
  ASSIGN_OR_RETURN(out.reward, SummarizeMeanCi(out.rewards));
  return out;
}

nlohmann::json RougeScores::ToJson() const {
  return {{"rouge1", rouge1}, {"rouge2", rouge2}, {"rougeL", rouge_l}};
}

namespace {

double F1(double overlap, double candidate_total, double reference_total) {
  if (overlap <= 0 || candidate_total <= 0 || reference_total <= 0) return 0.0;
  const double p = overlap / candidate_total;
  const double r = overlap / reference_total;
  return 2 * p * r / (p + r);
}

template <typename Gram>
double ClippedOverlap(const std::vector<Gram>& a, const std::vector<Gram>& b) {
  std::map<Gram, int64_t> counts;
  for (const Gram& g : b) ++counts[g];
  int64_t overlap = 0;
  for (const Gram& g : a) {
    auto it = counts.find(g);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return static_cast<double>(overlap);
}

std::vector<std::pair<std::string, std::string>> Bigrams(std::span<const std::string> words) {
  std::vector<std::pair<std::string, std::string>> out;
  for (size_t i = 0; i + 1 < words.size(); ++i) out.emplace_back(words[i], words[i + 1]);
  return out;
}

size_t LcsLength(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

absl::StatusOr<RougeScores> Rouge(std::span<const std::string> candidate,
                                  std::span<const std::string> reference) {
  if (reference.empty()) return absl::InvalidArgumentError("empty ROUGE reference");
  RougeScores s;
  const std::vector<std::string> cand(candidate.begin(), candidate.end());
  const std::vector<std::string> ref(reference.begin(), reference.end());
  s.rouge1 = F1(ClippedOverlap(cand, ref), cand.size(), ref.size());
  const auto cand2 = Bigrams(candidate);
  const auto ref2 = Bigrams(reference);
  if (cand2.empty() && ref2.empty()) {
    s.rouge2 = cand == ref ? 1.0 : 0.0;
  } else {
    s.rouge2 = F1(ClippedOverlap(cand2, ref2), cand2.size(), ref2.size());
  }
  s.rouge_l = F1(static_cast<double>(LcsLength(candidate, reference)), cand.size(), ref.size());
  return s;
}

absl::StatusOr<RougeScores> RougeText(std::string_view candidate, std::string_view reference) {
  auto words = [](std::string_view text) {
    std::vector<std::string> out = absl::StrSplit(absl::string_view(text.data(), text.size()),
                                                  absl::ByAnyChar(" \t\n\r"),
                                                  absl::SkipEmpty());
    return out;
  };
  return Rouge(words(candidate), words(reference));
}

namespace {

// State of one pipeline run, kept so a failure can still be reported.
struct RunState {
  const RunConfig& config;
  std::filesystem::path dir;
  nlohmann::json report = nlohmann::json::object();
  std::vector<std::string> artifacts = {};
  std::optional<PrivacyBudget> budget = std::nullopt;
  std::ofstream metrics = {};

  absl::Status Write(const std::string& name, const std::string& contents) {
    RETURN_IF_ERROR(WriteFile((dir / name).string(), contents));
    artifacts.push_back(name);
    return absl::OkStatus();
  }
  absl::Status Save(const std::string& name, const TinyLM& model) {
    RETURN_IF_ERROR(SaveCheckpoint(model, (dir / name).string()));
    artifacts.push_back(name);
    return absl::OkStatus();
  }
  MetricsSink Sink(const std::string& stage) {
    return [this, stage](const nlohmann::json& j) {
      nlohmann::json record = j;
      if (!record.contains("stage")) record["stage"] = stage;
      metrics << record.dump() << "\n";
    };
  }
};

std::vector<std::string> Prompts(const std::vector<CorpusRecord>& records, int prompt_words) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const CorpusRecord& r : records) out.push_back(SplitPromptTarget(r.text, prompt_words).prompt);
  return out;
}

absl::StatusOr<nlohmann::json> Evaluate(const RunConfig& config, const TinyLM& model,
                                        const std::vector<SftExample>& test,
                                        const RewardFunction& reward,
                                        const SyntheticOracle& oracle) {
  std::vector<std::string> prompts;
  for (const SftExample& e : test) prompts.push_back(e.prompt);
  // Every model sees the same eval stream.
  Rng rng = Rng::Substream(config.seed, "eval");
  ASSIGN_OR_RETURN(EvalResult result,
                   EvalMeanReward(model, prompts, reward, config.eval_generation, rng));
  std::vector<double> lexicon;
  RougeScores rouge_sum;
  for (size_t i = 0; i < test.size(); ++i) {
    lexicon.push_back(LexiconReward(oracle, result.responses[i]));
    ASSIGN_OR_RETURN(RougeScores r, RougeText(DecodeBytes(result.responses[i]), test[i].target));
    rouge_sum.rouge1 += r.rouge1;
    rouge_sum.rouge2 += r.rouge2;
    rouge_sum.rouge_l += r.rouge_l;
  }
  ASSIGN_OR_RETURN(MeanCi lexicon_ci, SummarizeMeanCi(lexicon));
  const double n = static_cast<double>(test.size());
  RougeScores rouge{rouge_sum.rouge1 / n, rouge_sum.rouge2 / n, rouge_sum.rouge_l / n};
  nlohmann::json j = result.reward.ToJson();
  j["lexicon_reward"] = lexicon_ci.ToJson();
  j["rouge"] = rouge.ToJson();
  return j;
}

absl::Status RunStages(RunState& st) {
  const RunConfig& cfg = st.config;
  const SyntheticOracle oracle = DefaultOracle(cfg.oracle_noise_rate);
  st.report["config"] = cfg.ToJson();

  // Corpus and held-out test records.
  std::vector<CorpusRecord> corpus;
  if (cfg.corpus_path.empty()) {
    Rng rng = Rng::Substream(cfg.seed, "corpus");
    ASSIGN_OR_RETURN(corpus, GenerateCorpus(cfg.corpus, oracle, rng));
  } else {
    ASSIGN_OR_RETURN(std::string text, ReadFile(cfg.corpus_path));
    ASSIGN_OR_RETURN(corpus, ParseCorpus(text));
  }
  RETURN_IF_ERROR(st.Write("corpus.tsv", FormatCorpus(corpus)));
  CorpusConfig test_config = cfg.corpus;
  test_config.size = cfg.test_size;
  Rng test_rng = Rng::Substream(cfg.seed, "test");
  ASSIGN_OR_RETURN(std::vector<CorpusRecord> test_records,
                   GenerateCorpus(test_config, oracle, test_rng, "t"));
  {
    std::set<std::string> ids;
    for (const CorpusRecord& r : corpus) ids.insert(r.id);
    for (const CorpusRecord& r : test_records) {
      if (ids.contains(r.id)) {
        return absl::FailedPreconditionError("test id '" + r.id + "' is also a training id");
      }
    }
  }
  RETURN_IF_ERROR(st.Write("test.tsv", FormatCorpus(test_records)));
  std::vector<SftExample> test;
  for (const CorpusRecord& r : test_records) {
    test.push_back(SplitPromptTarget(r.text, cfg.corpus.prompt_words));
  }

  // Partition and certify before touching any private record.
  PartitionManifest manifest;
  if (cfg.manifest_path.empty()) {
    ASSIGN_OR_RETURN(Partitioned p, PartitionCorpus(corpus, cfg.fractions, cfg.seed));
    manifest = std::move(p.manifest);
  } else {
    ASSIGN_OR_RETURN(std::string text, ReadFile(cfg.manifest_path));
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) return absl::InvalidArgumentError("manifest is not valid JSON");
    ASSIGN_OR_RETURN(manifest, PartitionManifest::FromJson(j));
  }
  RETURN_IF_ERROR(st.Write("manifest.json", manifest.ToJson().dump(2) + "\n"));
  st.report["manifest"] = {{"corpus_hash", manifest.corpus_hash},
                           {"corpus_size", manifest.corpus_size},
                           {"sizes", manifest.sizes()},
                           {"disjoint", manifest.disjoint}};
  ASSIGN_OR_RETURN(DisjointnessCertificate certificate, VerifyManifest(manifest, corpus));
  st.report["manifest"]["certificate_fingerprint"] = Hex64(certificate.fingerprint());
  ASSIGN_OR_RETURN(auto parts, ApplyManifest(manifest, corpus));

  std::vector<SftExample> d1;
  for (const CorpusRecord& r : parts[0]) d1.push_back(SplitPromptTarget(r.text, cfg.corpus.prompt_words));
  const std::vector<std::string> d2 = Prompts(parts[1], cfg.corpus.prompt_words);
  const std::vector<std::string> d3 = Prompts(parts[2], cfg.corpus.prompt_words);
  RETURN_IF_ERROR(st.Write("d1.tsv", FormatSftDataset(d1)));
  RETURN_IF_ERROR(st.Write("d2_prompts.txt", FormatPromptList(d2)));
  RETURN_IF_ERROR(st.Write("d3_prompts.txt", FormatPromptList(d3)));

  ASSIGN_OR_RETURN(TinyLM init, cfg.model_init.empty() ? TinyLM::Create(cfg.model)
                                                       : LoadCheckpoint(cfg.model_init));

  const std::array<bool, 3> run = cfg.StagesRun();
  st.report["stages"] = nlohmann::json::array();
  std::vector<PrivacyBudget> budgets;

  TinyLM sft_model = init;
  if (run[0]) {
    StageReport rep;
    ASSIGN_OR_RETURN(sft_model, RunSftStage(init, d1, cfg.sft, &rep, st.Sink("sft")));
    st.report["stages"].push_back(rep.ToJson());
    budgets.push_back(rep.budget());
    RETURN_IF_ERROR(st.Save("sft.ckpt", sft_model));
  }

  std::unique_ptr<RewardFunction> ppo_reward;
  std::unique_ptr<RewardFunction> eval_reward;
  if (run[1]) {
    PreferenceSynthStats stats;
    Rng prefs_rng = Rng::Substream(cfg.seed, "prefs");
    ASSIGN_OR_RETURN(std::vector<PreferenceRecord> prefs,
                     SynthesizePreferences(sft_model, d2, oracle, cfg.prefs, prefs_rng, &stats));
    RETURN_IF_ERROR(st.Write("prefs.tsv", FormatPreferenceDataset(prefs)));
    StageReport rep;
    ASSIGN_OR_RETURN(TinyLM reward_model,
                     RunRewardStage(sft_model, prefs, cfg.reward, &rep, st.Sink("reward")));
    rep.details["preferences"] = {{"records", stats.records},
                                  {"flipped", stats.flipped},
                                  {"coin_ties", stats.coin_ties},
                                  {"dropped", stats.dropped}};
    st.report["stages"].push_back(rep.ToJson());
    budgets.push_back(rep.budget());
    RETURN_IF_ERROR(st.Save("reward.ckpt", reward_model));
    if (cfg.eval_reward_model.empty()) {
      // Validate() admits this only for a nonprivate reward stage.
      eval_reward = std::make_unique<ModelRewardFunction>(reward_model, true);
    }
    ppo_reward = std::make_unique<ModelRewardFunction>(std::move(reward_model), false);
  } else {
    ppo_reward = std::make_unique<LexiconRewardFunction>(oracle);
  }
  if (!cfg.eval_reward_model.empty()) {
    ASSIGN_OR_RETURN(TinyLM eval_model, LoadCheckpoint(cfg.eval_reward_model));
    eval_reward = std::make_unique<ModelRewardFunction>(std::move(eval_model), true);
  } else if (eval_reward == nullptr) {
    eval_reward = std::make_unique<LexiconRewardFunction>(oracle);
  }

  TinyLM final_model = sft_model;
  if (run[2]) {
    StageReport rep;
    ASSIGN_OR_RETURN(final_model,
                     RunPpoStage(sft_model, d3, *ppo_reward, cfg.ppo, &rep, st.Sink("ppo")));
    st.report["stages"].push_back(rep.ToJson());
    budgets.push_back(rep.budget());
  }
  RETURN_IF_ERROR(st.Save("final.ckpt", final_model));

  ASSIGN_OR_RETURN(PrivacyBudget total, ComposeParallel(budgets, &certificate));
  st.budget = total;
  std::vector<std::string> composed;
  for (const auto& s : st.report["stages"]) composed.push_back(s["stage"].get<std::string>());
  st.report["privacy"] = {{"epsilon", EpsilonJson(total.epsilon)},
                          {"delta", total.delta},
                          {"composition", "parallel"},
                          {"stages", composed}};

  nlohmann::json eval = {{"reward_function", eval_reward->name()},
                         {"test_size", static_cast<int64_t>(test.size())}};
  ASSIGN_OR_RETURN(eval["init"], Evaluate(cfg, init, test, *eval_reward, oracle));
  if (run[0]) {
    ASSIGN_OR_RETURN(eval["sft"], Evaluate(cfg, sft_model, test, *eval_reward, oracle));
  }
  if (run[2]) {
    ASSIGN_OR_RETURN(eval["final"], Evaluate(cfg, final_model, test, *eval_reward, oracle));
  }
  st.report["eval"] = std::move(eval);
  return absl::OkStatus();
}

}  // namespace

absl::StatusOr<PipelineResult> RunPipeline(const RunConfig& config) {
  RETURN_IF_ERROR(config.Validate());
  RunState st{config, std::filesystem::path(config.output_dir)};
  std::error_code ec;
  std::filesystem::create_directories(st.dir, ec);
  if (ec) {
    return absl::InvalidArgumentError("cannot create output_dir " + config.output_dir + ": " +
                                      ec.message());
  }
  st.metrics.open(st.dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!st.metrics) return absl::InternalError("cannot open metrics.jsonl");
  st.report["kind"] = PipelineKindName(config.kind);
  absl::Status status = RunStages(st);
  st.metrics.close();
  st.artifacts.push_back("metrics.jsonl");
  if (status.ok()) {
    st.report["status"] = "ok";
  } else {
    st.report["status"] = "failed";
    st.report["error"] = {{"code", absl::StatusCodeToString(status.code())},
                          {"message", std::string(status.message())}};
    st.report.erase("privacy");
  }
  st.report["artifacts"] = st.artifacts;
  RETURN_IF_ERROR(WriteFile((st.dir / "report.json").string(), st.report.dump(2) + "\n"));
  if (!status.ok()) return status;
  return PipelineResult{st.report, st.budget};
}

}  // namespace dpalign

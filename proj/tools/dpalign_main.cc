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

// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 privacy-constraint violation, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "dpalign/accountant.h"
#include "dpalign/checkpoint.h"
#include "dpalign/config.h"
#include "dpalign/datasets.h"
#include "dpalign/pipeline.h"
#include "dpalign/ppo.h"
#include "dpalign/stages.h"
#include "dpalign/status_macros.h"
#include "dpalign/synthetic.h"
#include "dpalign/tiny_lm.h"
#include "dpalign/tokenizer.h"

namespace dpalign {
namespace {

int ExitCode(const absl::Status& s) {
  switch (s.code()) {
    case absl::StatusCode::kOk: return 0;
    case absl::StatusCode::kInvalidArgument: return 2;
    case absl::StatusCode::kFailedPrecondition:
    case absl::StatusCode::kOutOfRange: return 3;
    default: return 1;
  }
}

// Options shared by the commands that read a RunConfig.
struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  bool allow_mixed = false;

  void Attach(CLI::App* app) {
    app->add_option("--config", path, "flat key=value config file");
    app->add_option("--set", sets, "extra key=value line, applied after the file");
    app->add_flag("--allow-mixed", allow_mixed, "permit dp and nonprivate stages in one run");
  }
  absl::StatusOr<RunConfig> Load() const {
    std::vector<std::string> lines = sets;
    if (allow_mixed) lines.push_back("allow_mixed=true");
    if (path.empty()) return ParseRunConfig("", lines);
    return LoadRunConfig(path, lines);
  }
};

absl::StatusOr<TinyLM> InitModel(const std::string& path, const RunConfig& config) {
  if (!path.empty()) return LoadCheckpoint(path);
  if (!config.model_init.empty()) return LoadCheckpoint(config.model_init);
  return TinyLM::Create(config.model);
}

MetricsSink FileSink(const std::string& path, std::shared_ptr<std::ofstream>& file) {
  if (path.empty()) return nullptr;
  file = std::make_shared<std::ofstream>(path, std::ios::binary | std::ios::trunc);
  auto f = file;
  return [f](const nlohmann::json& j) { *f << j.dump() << "\n"; };
}

absl::StatusOr<std::vector<CorpusRecord>> LoadCorpus(const std::string& path) {
  ASSIGN_OR_RETURN(std::string text, ReadFile(path));
  return ParseCorpus(text);
}

absl::Status PrintJson(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
    return absl::OkStatus();
  }
  return WriteFile(path, j.dump(2) + "\n");
}

}  // namespace
}  // namespace dpalign

int main(int argc, char** argv) {
  using namespace dpalign;
  CLI::App app{"Differentially private SFT, reward modelling and PPO for tiny LMs"};
  app.require_subcommand(1);
  std::function<absl::Status()> action;

  // gen-corpus
  CorpusConfig corpus_config;
  uint64_t corpus_seed = 0;
  std::string corpus_prefix = "r", corpus_out;
  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic sentiment corpus (id<TAB>text)");
  gen->add_option("--size", corpus_config.size);
  gen->add_option("--lexicon-overlap", corpus_config.lexicon_overlap);
  gen->add_option("--prompt-words", corpus_config.prompt_words);
  gen->add_option("--seed", corpus_seed);
  gen->add_option("--id-prefix", corpus_prefix);
  gen->add_option("--out", corpus_out)->required();
  gen->callback([&] {
    action = [&]() -> absl::Status {
      Rng rng = Rng::Substream(corpus_seed, "corpus");
      ASSIGN_OR_RETURN(auto corpus,
                       GenerateCorpus(corpus_config, DefaultOracle(), rng, corpus_prefix));
      return WriteFile(corpus_out, FormatCorpus(corpus));
    };
  });

  // partition
  std::string part_corpus, part_fractions = "0.5,0,0.5", part_dir;
  uint64_t part_seed = 0;
  int part_prompt_words = 3;
  auto* part = app.add_subcommand("partition", "split a corpus into disjoint D1, D2, D3");
  part->add_option("--corpus", part_corpus)->required();
  part->add_option("--fractions", part_fractions, "sft,reward,ppo");
  part->add_option("--seed", part_seed);
  part->add_option("--prompt-words", part_prompt_words);
  part->add_option("--out-dir", part_dir)->required();
  part->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(auto corpus, LoadCorpus(part_corpus));
      ASSIGN_OR_RETURN(RunConfig cfg,
                       ParseRunConfig("", {"partition.fractions=" + part_fractions}));
      ASSIGN_OR_RETURN(Partitioned p, PartitionCorpus(corpus, cfg.fractions, part_seed));
      RETURN_IF_ERROR(VerifyManifest(p.manifest, corpus).status());
      std::filesystem::create_directories(part_dir);
      const std::string dir = part_dir + "/";
      RETURN_IF_ERROR(WriteFile(dir + "manifest.json", p.manifest.ToJson().dump(2) + "\n"));
      std::vector<SftExample> d1;
      for (const auto& r : p.parts[0]) d1.push_back(SplitPromptTarget(r.text, part_prompt_words));
      RETURN_IF_ERROR(WriteFile(dir + "d1.tsv", FormatSftDataset(d1)));
      for (int k = 1; k < kNumPartitions; ++k) {
        std::vector<std::string> prompts;
        for (const auto& r : p.parts[k]) {
          prompts.push_back(SplitPromptTarget(r.text, part_prompt_words).prompt);
        }
        RETURN_IF_ERROR(WriteFile(absl::StrCat(dir, "d", k + 1, "_prompts.txt"),
                                  FormatPromptList(prompts)));
      }
      return absl::OkStatus();
    };
  });

  // sft / reward / ppo share config handling.
  ConfigArgs stage_args;
  std::string stage_init, stage_data, stage_out, stage_metrics, stage_report, stage_reward_model;
  bool stage_reward_public = false;
  auto attach_stage = [&](CLI::App* sub, const char* data_help) {
    stage_args.Attach(sub);
    sub->add_option("--init", stage_init, "initial checkpoint (default: model.* keys)");
    sub->add_option("--data", stage_data, data_help)->required();
    sub->add_option("--out", stage_out, "output checkpoint")->required();
    sub->add_option("--metrics", stage_metrics, "per-step JSON-lines file");
    sub->add_option("--report", stage_report, "stage report JSON (default stdout)");
  };
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning on prompt<TAB>target lines");
  attach_stage(sft, "SFT dataset");
  sft->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(RunConfig cfg, stage_args.Load());
      ASSIGN_OR_RETURN(TinyLM init, InitModel(stage_init, cfg));
      ASSIGN_OR_RETURN(auto data, LoadSftDataset(stage_data));
      std::shared_ptr<std::ofstream> file;
      StageReport rep;
      ASSIGN_OR_RETURN(TinyLM out,
                       RunSftStage(init, data, cfg.sft, &rep, FileSink(stage_metrics, file)));
      RETURN_IF_ERROR(SaveCheckpoint(out, stage_out));
      return PrintJson(rep.ToJson(), stage_report);
    };
  });
  auto* reward = app.add_subcommand("reward", "reward-model training on preference records");
  attach_stage(reward, "preference dataset (prompt, y0, y1, b)");
  reward->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(RunConfig cfg, stage_args.Load());
      ASSIGN_OR_RETURN(TinyLM init, InitModel(stage_init, cfg));
      ASSIGN_OR_RETURN(auto data, LoadPreferenceDataset(stage_data));
      std::shared_ptr<std::ofstream> file;
      StageReport rep;
      ASSIGN_OR_RETURN(TinyLM out, RunRewardStage(init, data, cfg.reward, &rep,
                                                  FileSink(stage_metrics, file)));
      RETURN_IF_ERROR(SaveCheckpoint(out, stage_out));
      return PrintJson(rep.ToJson(), stage_report);
    };
  });
  auto* ppo = app.add_subcommand("ppo", "PPO alignment on a prompt list");
  attach_stage(ppo, "prompt list (one escaped prompt per line)");
  ppo->add_option("--reward-model", stage_reward_model,
                  "reward checkpoint (default: the public lexicon reward)");
  ppo->add_flag("--reward-public", stage_reward_public,
                "declare the reward model independent of private data");
  ppo->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(RunConfig cfg, stage_args.Load());
      ASSIGN_OR_RETURN(TinyLM init, InitModel(stage_init, cfg));
      ASSIGN_OR_RETURN(auto prompts, LoadPromptList(stage_data));
      std::unique_ptr<RewardFunction> rf;
      if (stage_reward_model.empty()) {
        rf = std::make_unique<LexiconRewardFunction>(DefaultOracle(cfg.oracle_noise_rate));
      } else {
        ASSIGN_OR_RETURN(TinyLM rm, LoadCheckpoint(stage_reward_model));
        rf = std::make_unique<ModelRewardFunction>(std::move(rm), stage_reward_public);
      }
      std::shared_ptr<std::ofstream> file;
      StageReport rep;
      ASSIGN_OR_RETURN(TinyLM out, RunPpoStage(init, prompts, *rf, cfg.ppo, &rep,
                                               FileSink(stage_metrics, file)));
      RETURN_IF_ERROR(SaveCheckpoint(out, stage_out));
      return PrintJson(rep.ToJson(), stage_report);
    };
  });

  // synth-prefs
  std::string sp_model, sp_prompts, sp_out;
  uint64_t sp_seed = 0;
  ConfigArgs sp_args;
  auto* sp = app.add_subcommand("synth-prefs", "label sampled completion pairs with the oracle");
  sp_args.Attach(sp);
  sp->add_option("--model", sp_model)->required();
  sp->add_option("--prompts", sp_prompts)->required();
  sp->add_option("--seed", sp_seed);
  sp->add_option("--out", sp_out)->required();
  sp->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(RunConfig cfg, sp_args.Load());
      ASSIGN_OR_RETURN(TinyLM model, LoadCheckpoint(sp_model));
      ASSIGN_OR_RETURN(auto prompts, LoadPromptList(sp_prompts));
      Rng rng = Rng::Substream(sp_seed, "prefs");
      PreferenceSynthStats stats;
      ASSIGN_OR_RETURN(auto prefs, SynthesizePreferences(model, prompts,
                                                         DefaultOracle(cfg.oracle_noise_rate),
                                                         cfg.prefs, rng, &stats));
      std::cout << "records=" << stats.records << " flipped=" << stats.flipped
                << " coin_ties=" << stats.coin_ties << " dropped=" << stats.dropped << "\n";
      return WriteFile(sp_out, FormatPreferenceDataset(prefs));
    };
  });

  // pipeline
  ConfigArgs pipe_args;
  std::string pipe_out;
  auto* pipe = app.add_subcommand("pipeline", "run partition, SFT, reward and PPO end to end");
  pipe_args.Attach(pipe);
  pipe->add_option("--output-dir", pipe_out, "overrides output_dir");
  pipe->callback([&] {
    action = [&]() -> absl::Status {
      if (!pipe_out.empty()) pipe_args.sets.push_back("output_dir=" + pipe_out);
      ASSIGN_OR_RETURN(RunConfig cfg, pipe_args.Load());
      ASSIGN_OR_RETURN(PipelineResult r, RunPipeline(cfg));
      std::cout << "epsilon=" << EpsilonJson(r.budget->epsilon).dump()
                << " delta=" << r.budget->delta << " report=" << cfg.output_dir
                << "/report.json\n";
      return absl::OkStatus();
    };
  });

  // eval
  std::string ev_model, ev_prompts, ev_reward_model, ev_out;
  uint64_t ev_seed = 0;
  GenerationConfig ev_gen;
  auto* ev = app.add_subcommand("eval", "mean reward of sampled responses with a 95% CI");
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--prompts", ev_prompts, "prompt list")->required();
  ev->add_option("--reward-model", ev_reward_model, "default: the lexicon reward");
  ev->add_option("--seed", ev_seed);
  ev->add_option("--max-new", ev_gen.max_new);
  ev->add_option("--temperature", ev_gen.temperature);
  ev->add_option("--top-k", ev_gen.top_k);
  ev->add_option("--out", ev_out, "JSON output (default stdout)");
  ev->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(TinyLM model, LoadCheckpoint(ev_model));
      ASSIGN_OR_RETURN(auto prompts, LoadPromptList(ev_prompts));
      std::unique_ptr<RewardFunction> rf;
      if (ev_reward_model.empty()) {
        rf = std::make_unique<LexiconRewardFunction>(DefaultOracle());
      } else {
        ASSIGN_OR_RETURN(TinyLM rm, LoadCheckpoint(ev_reward_model));
        rf = std::make_unique<ModelRewardFunction>(std::move(rm), true);
      }
      Rng rng = Rng::Substream(ev_seed, "eval");
      ASSIGN_OR_RETURN(EvalResult r, EvalMeanReward(model, prompts, *rf, ev_gen, rng));
      nlohmann::json j = r.reward.ToJson();
      j["reward_function"] = rf->name();
      j["summary"] = r.reward.ToString();
      return PrintJson(j, ev_out);
    };
  });

  // rouge
  std::string rg_candidate, rg_reference;
  auto* rg = app.add_subcommand("rouge", "word-level ROUGE-1/2/L F1");
  rg->add_option("--candidate", rg_candidate)->required();
  rg->add_option("--reference", rg_reference)->required();
  rg->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(RougeScores s, RougeText(rg_candidate, rg_reference));
      std::printf("rouge1=%.6f rouge2=%.6f rougeL=%.6f\n", s.rouge1, s.rouge2, s.rouge_l);
      return absl::OkStatus();
    };
  });

  // accountant
  MechanismParams mech{1.0, 0.01, 1000};
  double acc_delta = 1e-5, acc_target = 0;
  auto* acc = app.add_subcommand("accountant", "epsilon of a subsampled Gaussian mechanism, "
                                               "or sigma for a target epsilon");
  acc->add_option("--sigma", mech.noise_multiplier);
  acc->add_option("--q", mech.sampling_prob);
  acc->add_option("--steps", mech.steps);
  acc->add_option("--delta", acc_delta);
  acc->add_option("--target-epsilon", acc_target, "calibrate sigma instead");
  acc->callback([&] {
    action = [&]() -> absl::Status {
      if (acc_target > 0) {
        ASSIGN_OR_RETURN(double sigma, CalibrateSigma({acc_target, acc_delta},
                                                      mech.sampling_prob, mech.steps));
        mech.noise_multiplier = sigma;
      }
      ASSIGN_OR_RETURN(EpsilonResult e, ComputeEpsilon(mech, acc_delta));
      std::printf("sigma=%.6g q=%.6g steps=%lld delta=%.6g epsilon=%.6f order=%.6g\n",
                  mech.noise_multiplier, mech.sampling_prob,
                  static_cast<long long>(mech.steps), acc_delta, e.epsilon, e.order);
      return absl::OkStatus();
    };
  });

  // generate
  std::string gn_model, gn_prompt;
  uint64_t gn_seed = 0;
  GenerationConfig gn_gen;
  auto* gn = app.add_subcommand("generate", "sample a completion");
  gn->add_option("--model", gn_model)->required();
  gn->add_option("--prompt", gn_prompt)->required();
  gn->add_option("--seed", gn_seed);
  gn->add_option("--max-new", gn_gen.max_new);
  gn->add_option("--temperature", gn_gen.temperature);
  gn->add_option("--top-k", gn_gen.top_k);
  gn->callback([&] {
    action = [&]() -> absl::Status {
      ASSIGN_OR_RETURN(TinyLM model, LoadCheckpoint(gn_model));
      Rng rng = Rng::Substream(gn_seed, "generation");
      ASSIGN_OR_RETURN(Generation g, Generate(model, EncodePrompt(gn_prompt), gn_gen, rng));
      std::cout << gn_prompt << DecodeBytes(g.tokens) << "\n";
      return absl::OkStatus();
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  absl::Status status = action();
  if (!status.ok()) {
    std::cerr << "error: " << status << "\n";
    return ExitCode(status);
  }
  return 0;
}

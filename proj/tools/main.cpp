// cotprune CLI: data preparation, pruner training, evaluation, and one-off
// prompt pruning. Talks to the core exclusively through the C API.

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cotprune/cotprune.h"

namespace {

struct ConfigGuard {
  cp_config* cfg = nullptr;
  ~ConfigGuard() { cp_config_free(cfg); }
};

struct StringGuard {
  char* s = nullptr;
  ~StringGuard() { cp_string_free(s); }
};

int fail(cp_status status, const char* what) {
  std::fprintf(stderr, "cotprune %s failed: %s\n", what, cp_last_error());
  return status == CP_OK ? 1 : static_cast<int>(status);
}

cp_status load_config(const std::string& config_path,
                      const std::vector<std::string>& overrides,
                      ConfigGuard& guard) {
  cp_status st = config_path.empty() ? cp_config_default(&guard.cfg)
                                     : cp_config_load(config_path.c_str(), &guard.cfg);
  if (st != CP_OK) return st;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "cotprune: --set expects key=value, got '%s'\n",
                   kv.c_str());
      return CP_ERR_CONFIG;
    }
    st = cp_config_override(guard.cfg, kv.substr(0, eq).c_str(),
                            kv.substr(eq + 1).c_str());
    if (st != CP_OK) return st;
  }
  return CP_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cotprune: budgeted few-shot CoT prompt pruning"};
  app.set_version_flag("--version", std::string(cp_version()));
  app.require_subcommand(1);

  std::string config_path;
  std::string seed;
  std::string backend;
  std::string out_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Config file (JSON)");
  app.add_option("--seed", seed, "Master seed override");
  app.add_option("--backend", backend, "Backend: synthetic or remote");
  app.add_option("--out", out_dir, "Output directory override");
  app.add_option("--set", overrides, "Extra config override key=value")
      ->take_all();

  auto* prepare = app.add_subcommand(
      "prepare", "Evolve and score the corpus, then split it");
  std::string prepare_resume;
  prepare->add_option("--resume", prepare_resume,
                      "Resume manifest from an interrupted run");

  auto* train = app.add_subcommand("train", "Train the two-stage pruner");
  std::string train_resume;
  train->add_option("--resume", train_resume, "Resume file from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate pruning and baselines");
  std::string methods;
  double floor = -1.0;
  eval->add_option("--methods", methods,
                   "Comma-separated methods "
                   "(influx,topk,bm25,random,fewshot8,zeroshot)");
  eval->add_option("--floor", floor, "Fail when the gated EM drops below this");

  auto* prune = app.add_subcommand("prune", "Build one pruned prompt");
  std::string question;
  std::string checkpoint;
  prune->add_option("--question", question, "Target question text")->required();
  prune->add_option("--checkpoint", checkpoint, "Checkpoint path override");

  CLI11_PARSE(app, argc, argv);

  ConfigGuard guard;
  std::vector<std::string> all_overrides;
  if (!seed.empty()) all_overrides.push_back("seed=" + seed);
  if (!backend.empty()) all_overrides.push_back("backend=" + backend);
  if (!out_dir.empty()) all_overrides.push_back("paths.out_dir=" + out_dir);
  all_overrides.insert(all_overrides.end(), overrides.begin(), overrides.end());
  if (cp_status st = load_config(config_path, all_overrides, guard); st != CP_OK)
    return fail(st, "config");

  if (prepare->parsed()) {
    StringGuard summary;
    const cp_status st = cp_run_prepare(
        guard.cfg, prepare_resume.empty() ? nullptr : prepare_resume.c_str(),
        &summary.s);
    if (st != CP_OK) return fail(st, "prepare");
    std::fputs(summary.s, stdout);
    return 0;
  }
  if (train->parsed()) {
    StringGuard summary;
    const cp_status st = cp_run_train(
        guard.cfg, train_resume.empty() ? nullptr : train_resume.c_str(),
        &summary.s);
    if (st != CP_OK) return fail(st, "train");
    std::fputs(summary.s, stdout);
    return 0;
  }
  if (eval->parsed()) {
    StringGuard table, summary;
    const cp_status st =
        cp_run_eval(guard.cfg, methods.empty() ? nullptr : methods.c_str(),
                    floor, &table.s, &summary.s);
    if (table.s) std::fputs(table.s, stdout);
    if (summary.s) std::fputs(summary.s, stdout);
    if (st != CP_OK) return fail(st, "eval");
    return 0;
  }
  if (prune->parsed()) {
    cp_pruner* pruner = nullptr;
    cp_status st = cp_pruner_open(
        guard.cfg, checkpoint.empty() ? nullptr : checkpoint.c_str(), &pruner);
    if (st != CP_OK) return fail(st, "prune");
    StringGuard prompt;
    st = cp_pruner_prune(pruner, question.c_str(), &prompt.s);
    cp_pruner_free(pruner);
    if (st != CP_OK) return fail(st, "prune");
    std::fputs(prompt.s, stdout);
    std::fputc('\n', stdout);
    return 0;
  }
  return 1;
}

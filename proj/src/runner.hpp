#pragma once

// Internal command implementations shared by the C API. Not installed.

#include <memory>
#include <string>
#include <vector>

#include "cotprune/config.hpp"
#include "cotprune/encoder.hpp"
#include "cotprune/oracle.hpp"
#include "cotprune/policy.hpp"
#include "cotprune/retrieval.hpp"

namespace cotprune::runner {

struct Backends {
  std::unique_ptr<encoder::EncoderBackend> enc;
  std::unique_ptr<oracle::OracleBackend> oracle;
};

Backends make_backends(const config::AppConfig& cfg,
                       const std::vector<corpus::CotExample>& candidates,
                       const std::vector<corpus::CotExample>& questions);

// Dataset preparation: evolution + difficulty scoring + split. Returns a
// summary as JSON text.
std::string run_prepare(const config::AppConfig& cfg,
                        const std::string& resume_manifest);

// Policy training. Returns a summary as JSON text.
std::string run_train(const config::AppConfig& cfg,
                      const std::string& resume_path);

struct EvalOutcome {
  std::string table;         // human-readable comparison table + ratio lines
  std::string summary_json;  // per-method aggregates + report paths
  bool floor_failed = false;
};

EvalOutcome run_eval(const config::AppConfig& cfg,
                     const std::vector<std::string>& methods_override,
                     double floor_override);

// Plug-and-play pruner handle: retrieval + trained policy + assembly.
struct Pruner {
  config::AppConfig cfg;
  std::vector<corpus::CotExample> candidates;
  Backends backends;
  retrieval::RetrievalIndex index;
  policy::PolicyParams params;
  std::string anchor;
};

std::unique_ptr<Pruner> open_pruner(const config::AppConfig& cfg,
                                    const std::string& checkpoint_path);
std::string prune_question(const Pruner& pruner, const std::string& question);

}  // namespace cotprune::runner

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cotprune/assembly.hpp"
#include "cotprune/corpus.hpp"
#include "cotprune/encoder.hpp"
#include "cotprune/oracle.hpp"
#include "cotprune/policy.hpp"
#include "cotprune/retrieval.hpp"

namespace cotprune::harness {

enum class Method { influx, topk, bm25, random, fewshot8, zeroshot };

std::string_view method_name(Method m);
std::optional<Method> method_from_name(std::string_view name);

struct EvalOptions {
  Method method = Method::influx;
  int k = 40;
  int token_limit = 2048;
  bool sampled = false;     // influx only: sample instead of greedy threshold
  std::uint64_t seed = 1;
  bool protect_markers = true;
  std::size_t pad = encoder::kDefaultPad;
  int parallelism = 1;
  bool exclude_failed = false;  // drop failed oracle calls from the denominator
  std::string anchor;
  std::string traces_dir;  // when set, one JSON trace file per question
  retrieval::Bm25Params bm25{};
  oracle::GenerationParams gen{};
};

struct EvalRecord {
  std::string question_id;
  std::vector<std::string> retained_ids;
  int raw_tokens = 0;
  int after_shot_tokens = 0;
  int after_token_tokens = 0;
  int final_tokens = 0;
  std::string predicted;
  bool correct = false;
  bool failed = false;  // oracle failure (counted incorrect by default)
};

struct EvalReport {
  std::string method;
  std::vector<EvalRecord> records;
  double em = 0.0;          // correct / question count
  double mean_tokens = 0.0; // mean final token count
  double shot_ratio = 1.0;  // sum(raw) / sum(after shot stage)
  double total_ratio = 1.0; // sum(raw) / sum(final)
  double mean_retained_difficulty = 0.0;
  double mean_retained_steps = 0.0;
  int failed_count = 0;
};

// Single-question pruner-assisted inference (greedy pruning by default).
EvalRecord run_inference(const corpus::CotExample& question,
                         const policy::PolicyParams& params,
                         const retrieval::RetrievalIndex& index,
                         const std::vector<corpus::CotExample>& candidates,
                         const encoder::EncoderBackend& enc,
                         const oracle::OracleBackend& oracle,
                         const EvalOptions& opts);

// Full dataset sweep for one method. `params` may be null for the baseline
// methods, which bypass the policy.
EvalReport evaluate(const std::vector<corpus::CotExample>& dataset,
                    const EvalOptions& opts, const policy::PolicyParams* params,
                    const retrieval::RetrievalIndex& index,
                    const std::vector<corpus::CotExample>& candidates,
                    const encoder::EncoderBackend& enc,
                    const oracle::OracleBackend& oracle);

// Aligned table: method, mean retained shots, mean tokens, EM%.
std::string compare(const std::vector<EvalReport>& reports);

// One line in the per-stage pruning-ratio format.
std::string ratio_summary(const EvalReport& report);

std::string report_to_json(const EvalReport& report);
void save_report(const std::string& path, const EvalReport& report);

}  // namespace cotprune::harness

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cotprune/common.hpp"
#include "cotprune/corpus.hpp"

namespace cotprune::oracle {

struct GenerationParams {
  double temperature = 0.8;
  double top_p = 0.95;
  int top_k = 40;
  int num_beams = 1;
  int max_new_tokens = 256;
  std::uint64_t seed = 0;
};

struct OracleResponse {
  std::string generated;
  double answer_loss = 0.0;  // mean NLL of the gold continuation, >= 0
  int prompt_tokens = 0;     // token count of the prompt under the backend
};

// Substring after the last "The answer is", trimmed of trailing whitespace
// and one trailing period. nullopt when the marker is absent.
std::optional<std::string> extract_answer(std::string_view generated);

// Normalized form used for exact match: trimmed, lowercased, currency symbols
// and thousands commas stripped, trailing unit words dropped from numeric
// answers, numbers reduced to a canonical decimal.
std::string normalize_answer(std::string_view answer);

bool exact_match(std::string_view predicted, std::string_view gold);

class OracleBackend {
public:
  virtual ~OracleBackend() = default;
  virtual OracleResponse query(const std::string& prompt,
                               const std::string& gold_answer,
                               const GenerationParams& gen = {}) const = 0;
  virtual int count_tokens(const std::string& text) const = 0;
  virtual std::uint64_t state_hash() const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic backend: a deterministic stand-in LLM with planted preferences,
// used for desk-scale training and the test suite.
// ---------------------------------------------------------------------------

struct LossCurve {
  double base = 4.0;          // loss with zero useful shots retained
  double gold_gain = 0.45;    // loss drop per retained gold shot
  double filler_weight = 3.0; // scales the filler-token fraction
  double numeral_weight = 1.0;// scales the missing-numeral fraction
  double floor = 0.05;
};

struct SyntheticOracleSpec {
  std::vector<std::string> gold_ids;  // empty: every candidate counts as gold
  double noise = 0.0;                 // [0,1): probability of flipping the outcome
  LossCurve curve;
  std::vector<std::string> filler_words;  // empty: default function-word list
  double detect_threshold = 0.5;  // fraction of question words that must survive
  int required_gold = -1;         // -1: ceil(#gold / 2)
  double filler_max = 1.0;        // correctness gate on the filler fraction
  int difficulty_cap = 10;        // questions above this are always wrong
  std::uint64_t seed = 0;
};

const std::vector<std::string>& default_filler_words();

class SyntheticOracle final : public OracleBackend {
public:
  SyntheticOracle(SyntheticOracleSpec spec,
                  std::vector<corpus::CotExample> candidates,
                  std::vector<corpus::CotExample> questions);

  OracleResponse query(const std::string& prompt, const std::string& gold_answer,
                       const GenerationParams& gen = {}) const override;
  int count_tokens(const std::string& text) const override;
  std::uint64_t state_hash() const override;

  const SyntheticOracleSpec& spec() const { return spec_; }
  // Candidate ids whose question text survives in the prompt (test hook).
  std::vector<std::string> detect_retained(const std::string& prompt) const;

private:
  struct CandidateInfo {
    std::string id;
    std::set<std::string> question_words;
    std::vector<std::string> numerals;  // numeric terms of the rendered text
    bool gold = false;
  };

  OracleResponse answer_math(const std::string& prompt,
                             const std::string& gold_answer) const;
  OracleResponse answer_difficulty(const std::string& prompt) const;
  OracleResponse answer_evolution(const std::string& prompt) const;

  SyntheticOracleSpec spec_;
  std::vector<CandidateInfo> candidates_;
  std::map<std::string, int> question_difficulty_;  // question text -> score
  std::set<std::string> filler_;
  int required_gold_ = 0;
  std::size_t gold_count_ = 0;
};

// ---------------------------------------------------------------------------
// Remote backend: narrow wire contract over HTTP (see README).
// ---------------------------------------------------------------------------

class RemoteOracle final : public OracleBackend {
public:
  struct Options {
    std::string base_url;
    int timeout_ms = 60000;
    int retries = 2;
    std::string auth_token;
  };
  explicit RemoteOracle(Options opts);
  ~RemoteOracle() override;

  OracleResponse query(const std::string& prompt, const std::string& gold_answer,
                       const GenerationParams& gen = {}) const override;
  int count_tokens(const std::string& text) const override;
  std::uint64_t state_hash() const override;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Whitespace token count (the synthetic tokenizer rule).
int whitespace_tokens(std::string_view text);

}  // namespace cotprune::oracle

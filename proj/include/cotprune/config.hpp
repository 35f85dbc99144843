#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cotprune/common.hpp"
#include "cotprune/oracle.hpp"
#include "cotprune/reward.hpp"

namespace cotprune::config {

struct RemoteConfig {
  std::string oracle_url;   // env COTPRUNE_ORACLE_URL overrides
  std::string encoder_url;  // env COTPRUNE_ENCODER_URL overrides
  int timeout_ms = 60000;
  int retries = 2;
  std::string auth_env = "COTPRUNE_API_TOKEN";  // name of the token variable
};

struct PathsConfig {
  std::string seed_corpus;
  std::string corpus;      // evolved + scored corpus (prepare output)
  std::string questions;   // split output / train input
  std::string candidates;  // split output / train + eval input
  std::string eval_set;    // defaults to `questions` when empty
  std::string anchor = "assets/anchor_8shot.txt";
  std::string out_dir = "out";
  std::string checkpoint;  // defaults to <out_dir>/checkpoint.bin when empty
  std::string index_cache; // optional retrieval cache file
};

struct PrepareConfig {
  std::vector<std::string> schemes = {"add_constraints", "deepening",
                                      "increase_reasoning", "revise_difficulty",
                                      "produce_easier"};
  int per_scheme = 1;  // evolved variants kept per seed example and scheme
};

struct RetrievalConfig {
  std::string method = "topk";  // topk | bm25 | random
  int k = 40;
  double bm25_k1 = 1.5;
  double bm25_b = 0.75;
};

struct EncoderConfig {
  int dim = 64;   // synthetic backend dimension
  int pad = 512;  // tokenizer padding length
};

struct TrainSection {
  int epochs = 3;
  int k = 40;
  int token_limit = 2048;
  int t_repeat = 10;
  double lr = 1e-5;
  double weight_decay = 1e-2;
  double ema_decay = 0.9;
  double w_short = 1.0;
  double w_over = -1.0;
  int d_thr = 2;
  int hidden = 512;
  int checkpoint_interval = 25;
  double grad_max_norm = 0.0;  // 0 disables the guard
  bool protect_markers = true;
  bool count_anchor_tokens = true;
  int oracle_parallelism = 1;
};

struct EvalSection {
  std::vector<std::string> methods = {"influx"};
  double floor = -1.0;  // negative disables the accuracy gate
  bool sampled = false;
  int parallelism = 1;
  bool exclude_failed = false;
  bool emit_traces = false;
};

struct SyntheticSection {
  std::vector<std::string> gold_ids;
  double noise = 0.0;
  double base_loss = 4.0;
  double gold_gain = 0.45;
  double filler_weight = 3.0;
  double numeral_weight = 1.0;
  double loss_floor = 0.05;
  std::vector<std::string> filler_words;  // empty: built-in default list
  double detect_threshold = 0.5;
  int required_gold = -1;
  double filler_max = 1.0;
  int difficulty_cap = 10;
};

struct GenerationSection {
  double temperature = 0.8;
  double top_p = 0.95;
  int top_k = 40;
  int num_beams = 1;
  int max_new_tokens = 256;
};

struct AppConfig {
  std::uint64_t seed = 1;
  std::string backend = "synthetic";  // synthetic | remote
  std::string log = "info";           // quiet | info | debug
  RemoteConfig remote;
  PathsConfig paths;
  PrepareConfig prepare;
  RetrievalConfig retrieval;
  EncoderConfig encoder;
  TrainSection train;
  EvalSection eval;
  SyntheticSection synthetic;
  GenerationSection generation;
};

AppConfig default_config();

// Strict parse: unknown keys anywhere are rejected, numeric ranges checked.
AppConfig load_config(const std::string& path);
AppConfig parse_config_json(const std::string& json_text);

// Dotted-path override ("train.lr", "paths.out_dir", ...); the value string
// is coerced to the field's JSON type.
void apply_override(AppConfig& cfg, const std::string& dotted_key,
                    const std::string& value);

// Fully-resolved echo, written beside every run's outputs.
std::string to_json_text(const AppConfig& cfg);

void validate(const AppConfig& cfg);

oracle::GenerationParams generation_params(const AppConfig& cfg);
oracle::SyntheticOracleSpec synthetic_spec(const AppConfig& cfg);
reward::LengthExponents length_exponents(const AppConfig& cfg);

}  // namespace cotprune::config

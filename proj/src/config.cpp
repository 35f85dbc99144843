#include "cotprune/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace cotprune::config {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    raise(ErrorKind::config, "'" + where + "' must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key))
      raise(ErrorKind::config, "unknown config key '" + where +
                                   (where.empty() ? "" : ".") + key + "'");
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

json to_json(const AppConfig& c) {
  return json{
      {"seed", c.seed},
      {"backend", c.backend},
      {"log", c.log},
      {"remote",
       {{"oracle_url", c.remote.oracle_url},
        {"encoder_url", c.remote.encoder_url},
        {"timeout_ms", c.remote.timeout_ms},
        {"retries", c.remote.retries},
        {"auth_env", c.remote.auth_env}}},
      {"paths",
       {{"seed_corpus", c.paths.seed_corpus},
        {"corpus", c.paths.corpus},
        {"questions", c.paths.questions},
        {"candidates", c.paths.candidates},
        {"eval_set", c.paths.eval_set},
        {"anchor", c.paths.anchor},
        {"out_dir", c.paths.out_dir},
        {"checkpoint", c.paths.checkpoint},
        {"index_cache", c.paths.index_cache}}},
      {"prepare",
       {{"schemes", c.prepare.schemes}, {"per_scheme", c.prepare.per_scheme}}},
      {"retrieval",
       {{"method", c.retrieval.method},
        {"k", c.retrieval.k},
        {"bm25_k1", c.retrieval.bm25_k1},
        {"bm25_b", c.retrieval.bm25_b}}},
      {"encoder", {{"dim", c.encoder.dim}, {"pad", c.encoder.pad}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"k", c.train.k},
        {"token_limit", c.train.token_limit},
        {"t_repeat", c.train.t_repeat},
        {"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"ema_decay", c.train.ema_decay},
        {"w_short", c.train.w_short},
        {"w_over", c.train.w_over},
        {"d_thr", c.train.d_thr},
        {"hidden", c.train.hidden},
        {"checkpoint_interval", c.train.checkpoint_interval},
        {"grad_max_norm", c.train.grad_max_norm},
        {"protect_markers", c.train.protect_markers},
        {"count_anchor_tokens", c.train.count_anchor_tokens},
        {"oracle_parallelism", c.train.oracle_parallelism}}},
      {"eval",
       {{"methods", c.eval.methods},
        {"floor", c.eval.floor},
        {"sampled", c.eval.sampled},
        {"parallelism", c.eval.parallelism},
        {"exclude_failed", c.eval.exclude_failed},
        {"emit_traces", c.eval.emit_traces}}},
      {"synthetic",
       {{"gold_ids", c.synthetic.gold_ids},
        {"noise", c.synthetic.noise},
        {"base_loss", c.synthetic.base_loss},
        {"gold_gain", c.synthetic.gold_gain},
        {"filler_weight", c.synthetic.filler_weight},
        {"numeral_weight", c.synthetic.numeral_weight},
        {"loss_floor", c.synthetic.loss_floor},
        {"filler_words", c.synthetic.filler_words},
        {"detect_threshold", c.synthetic.detect_threshold},
        {"required_gold", c.synthetic.required_gold},
        {"filler_max", c.synthetic.filler_max},
        {"difficulty_cap", c.synthetic.difficulty_cap}}},
      {"generation",
       {{"temperature", c.generation.temperature},
        {"top_p", c.generation.top_p},
        {"top_k", c.generation.top_k},
        {"num_beams", c.generation.num_beams},
        {"max_new_tokens", c.generation.max_new_tokens}}}};
}

AppConfig from_json(const json& j) {
  AppConfig c;
  check_keys(j, "",
             {"seed", "backend", "log", "remote", "paths", "prepare",
              "retrieval", "encoder", "train", "eval", "synthetic",
              "generation"});
  get_to(j, "seed", c.seed);
  get_to(j, "backend", c.backend);
  get_to(j, "log", c.log);
  if (j.contains("remote")) {
    const auto& r = j.at("remote");
    check_keys(r, "remote",
               {"oracle_url", "encoder_url", "timeout_ms", "retries", "auth_env"});
    get_to(r, "oracle_url", c.remote.oracle_url);
    get_to(r, "encoder_url", c.remote.encoder_url);
    get_to(r, "timeout_ms", c.remote.timeout_ms);
    get_to(r, "retries", c.remote.retries);
    get_to(r, "auth_env", c.remote.auth_env);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    check_keys(p, "paths",
               {"seed_corpus", "corpus", "questions", "candidates", "eval_set",
                "anchor", "out_dir", "checkpoint", "index_cache"});
    get_to(p, "seed_corpus", c.paths.seed_corpus);
    get_to(p, "corpus", c.paths.corpus);
    get_to(p, "questions", c.paths.questions);
    get_to(p, "candidates", c.paths.candidates);
    get_to(p, "eval_set", c.paths.eval_set);
    get_to(p, "anchor", c.paths.anchor);
    get_to(p, "out_dir", c.paths.out_dir);
    get_to(p, "checkpoint", c.paths.checkpoint);
    get_to(p, "index_cache", c.paths.index_cache);
  }
  if (j.contains("prepare")) {
    const auto& p = j.at("prepare");
    check_keys(p, "prepare", {"schemes", "per_scheme"});
    get_to(p, "schemes", c.prepare.schemes);
    get_to(p, "per_scheme", c.prepare.per_scheme);
  }
  if (j.contains("retrieval")) {
    const auto& r = j.at("retrieval");
    check_keys(r, "retrieval", {"method", "k", "bm25_k1", "bm25_b"});
    get_to(r, "method", c.retrieval.method);
    get_to(r, "k", c.retrieval.k);
    get_to(r, "bm25_k1", c.retrieval.bm25_k1);
    get_to(r, "bm25_b", c.retrieval.bm25_b);
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    check_keys(e, "encoder", {"dim", "pad"});
    get_to(e, "dim", c.encoder.dim);
    get_to(e, "pad", c.encoder.pad);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"epochs", "k", "token_limit", "t_repeat", "lr", "weight_decay",
                "ema_decay", "w_short", "w_over", "d_thr", "hidden",
                "checkpoint_interval", "grad_max_norm", "protect_markers",
                "count_anchor_tokens", "oracle_parallelism"});
    get_to(t, "epochs", c.train.epochs);
    get_to(t, "k", c.train.k);
    get_to(t, "token_limit", c.train.token_limit);
    get_to(t, "t_repeat", c.train.t_repeat);
    get_to(t, "lr", c.train.lr);
    get_to(t, "weight_decay", c.train.weight_decay);
    get_to(t, "ema_decay", c.train.ema_decay);
    get_to(t, "w_short", c.train.w_short);
    get_to(t, "w_over", c.train.w_over);
    get_to(t, "d_thr", c.train.d_thr);
    get_to(t, "hidden", c.train.hidden);
    get_to(t, "checkpoint_interval", c.train.checkpoint_interval);
    get_to(t, "grad_max_norm", c.train.grad_max_norm);
    get_to(t, "protect_markers", c.train.protect_markers);
    get_to(t, "count_anchor_tokens", c.train.count_anchor_tokens);
    get_to(t, "oracle_parallelism", c.train.oracle_parallelism);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval",
               {"methods", "floor", "sampled", "parallelism", "exclude_failed",
                "emit_traces"});
    get_to(e, "methods", c.eval.methods);
    get_to(e, "floor", c.eval.floor);
    get_to(e, "sampled", c.eval.sampled);
    get_to(e, "parallelism", c.eval.parallelism);
    get_to(e, "exclude_failed", c.eval.exclude_failed);
    get_to(e, "emit_traces", c.eval.emit_traces);
  }
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    check_keys(s, "synthetic",
               {"gold_ids", "noise", "base_loss", "gold_gain", "filler_weight",
                "numeral_weight", "loss_floor", "filler_words",
                "detect_threshold", "required_gold", "filler_max",
                "difficulty_cap"});
    get_to(s, "gold_ids", c.synthetic.gold_ids);
    get_to(s, "noise", c.synthetic.noise);
    get_to(s, "base_loss", c.synthetic.base_loss);
    get_to(s, "gold_gain", c.synthetic.gold_gain);
    get_to(s, "filler_weight", c.synthetic.filler_weight);
    get_to(s, "numeral_weight", c.synthetic.numeral_weight);
    get_to(s, "loss_floor", c.synthetic.loss_floor);
    get_to(s, "filler_words", c.synthetic.filler_words);
    get_to(s, "detect_threshold", c.synthetic.detect_threshold);
    get_to(s, "required_gold", c.synthetic.required_gold);
    get_to(s, "filler_max", c.synthetic.filler_max);
    get_to(s, "difficulty_cap", c.synthetic.difficulty_cap);
  }
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    check_keys(g, "generation",
               {"temperature", "top_p", "top_k", "num_beams", "max_new_tokens"});
    get_to(g, "temperature", c.generation.temperature);
    get_to(g, "top_p", c.generation.top_p);
    get_to(g, "top_k", c.generation.top_k);
    get_to(g, "num_beams", c.generation.num_beams);
    get_to(g, "max_new_tokens", c.generation.max_new_tokens);
  }
  validate(c);
  return c;
}

}  // namespace

AppConfig default_config() { return AppConfig{}; }

AppConfig parse_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    raise(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

AppConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::io, "cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config_json(text);
}

void apply_override(AppConfig& cfg, const std::string& dotted_key,
                    const std::string& value) {
  json j = to_json(cfg);
  std::string pointer = "/";
  for (char c : dotted_key) pointer.push_back(c == '.' ? '/' : c);
  json::json_pointer ptr(pointer);
  if (!j.contains(ptr))
    raise(ErrorKind::config, "unknown config key '" + dotted_key + "'");
  json& slot = j.at(ptr);
  try {
    if (slot.is_string())
      slot = value;
    else if (slot.is_boolean())
      slot = (value == "true" || value == "1" || value == "yes");
    else if (slot.is_number_unsigned())
      slot = static_cast<std::uint64_t>(std::stoull(value));
    else if (slot.is_number_integer())
      slot = static_cast<std::int64_t>(std::stoll(value));
    else if (slot.is_number_float())
      slot = std::stod(value);
    else if (slot.is_array())
      slot = json::parse(value);  // e.g. '["influx","fewshot8"]'
    else
      raise(ErrorKind::config, "cannot override structured key '" + dotted_key + "'");
  } catch (const std::exception& e) {
    raise(ErrorKind::config, "bad value for '" + dotted_key + "': " + e.what());
  }
  cfg = from_json(j);
}

std::string to_json_text(const AppConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void validate(const AppConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) raise(ErrorKind::config, "config: " + what);
  };
  require(c.backend == "synthetic" || c.backend == "remote",
          "backend must be 'synthetic' or 'remote'");
  require(c.log == "quiet" || c.log == "info" || c.log == "debug",
          "log must be quiet|info|debug");
  require(c.prepare.per_scheme >= 1, "prepare.per_scheme must be >= 1");
  for (const auto& s : c.prepare.schemes) {
    auto o = corpus::origin_from_name(s);
    require(o.has_value() && *o != corpus::Origin::seed,
            "unknown evolution scheme '" + s + "'");
  }
  require(c.retrieval.method == "topk" || c.retrieval.method == "bm25" ||
              c.retrieval.method == "random",
          "retrieval.method must be topk|bm25|random");
  require(c.retrieval.k >= 1, "retrieval.k must be >= 1");
  require(c.retrieval.bm25_k1 > 0.0, "retrieval.bm25_k1 must be > 0");
  require(c.retrieval.bm25_b >= 0.0 && c.retrieval.bm25_b <= 1.0,
          "retrieval.bm25_b must be in [0, 1]");
  require(c.encoder.dim >= 1, "encoder.dim must be >= 1");
  require(c.encoder.pad >= 1, "encoder.pad must be >= 1");
  require(c.train.epochs >= 1, "train.epochs must be >= 1");
  require(c.train.k >= 1, "train.k must be >= 1");
  require(c.train.token_limit >= 1, "train.token_limit must be >= 1");
  require(c.train.t_repeat >= 1, "train.t_repeat must be >= 1");
  require(c.train.lr > 0.0, "train.lr must be > 0");
  require(c.train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  require(c.train.ema_decay > 0.0 && c.train.ema_decay < 1.0,
          "train.ema_decay must be in (0, 1)");
  require(c.train.w_short > 0.0, "train.w_short must be > 0");
  require(c.train.w_over < 0.0, "train.w_over must be < 0");
  require(c.train.d_thr >= 1 && c.train.d_thr <= 10,
          "train.d_thr must be in [1, 10]");
  require(c.train.hidden >= 1, "train.hidden must be >= 1");
  require(c.train.checkpoint_interval >= 1,
          "train.checkpoint_interval must be >= 1");
  require(c.train.grad_max_norm >= 0.0, "train.grad_max_norm must be >= 0");
  require(c.train.oracle_parallelism >= 1,
          "train.oracle_parallelism must be >= 1");
  require(!c.eval.methods.empty(), "eval.methods must be non-empty");
  for (const auto& m : c.eval.methods) {
    require(m == "influx" || m == "topk" || m == "bm25" || m == "random" ||
                m == "fewshot8" || m == "zeroshot",
            "unknown eval method '" + m + "'");
  }
  require(c.eval.parallelism >= 1, "eval.parallelism must be >= 1");
  require(c.synthetic.noise >= 0.0 && c.synthetic.noise < 1.0,
          "synthetic.noise must be in [0, 1)");
  require(c.synthetic.detect_threshold > 0.0 && c.synthetic.detect_threshold <= 1.0,
          "synthetic.detect_threshold must be in (0, 1]");
  require(c.synthetic.difficulty_cap >= 1 && c.synthetic.difficulty_cap <= 10,
          "synthetic.difficulty_cap must be in [1, 10]");
  require(c.generation.temperature >= 0.0, "generation.temperature must be >= 0");
  require(c.generation.top_p > 0.0 && c.generation.top_p <= 1.0,
          "generation.top_p must be in (0, 1]");
  require(c.generation.top_k >= 1, "generation.top_k must be >= 1");
  require(c.generation.num_beams >= 1, "generation.num_beams must be >= 1");
  require(c.generation.max_new_tokens >= 1,
          "generation.max_new_tokens must be >= 1");
}

oracle::GenerationParams generation_params(const AppConfig& c) {
  oracle::GenerationParams g;
  g.temperature = c.generation.temperature;
  g.top_p = c.generation.top_p;
  g.top_k = c.generation.top_k;
  g.num_beams = c.generation.num_beams;
  g.max_new_tokens = c.generation.max_new_tokens;
  g.seed = c.seed;
  return g;
}

oracle::SyntheticOracleSpec synthetic_spec(const AppConfig& c) {
  oracle::SyntheticOracleSpec s;
  s.gold_ids = c.synthetic.gold_ids;
  s.noise = c.synthetic.noise;
  s.curve.base = c.synthetic.base_loss;
  s.curve.gold_gain = c.synthetic.gold_gain;
  s.curve.filler_weight = c.synthetic.filler_weight;
  s.curve.numeral_weight = c.synthetic.numeral_weight;
  s.curve.floor = c.synthetic.loss_floor;
  s.filler_words = c.synthetic.filler_words;
  s.detect_threshold = c.synthetic.detect_threshold;
  s.required_gold = c.synthetic.required_gold;
  s.filler_max = c.synthetic.filler_max;
  s.difficulty_cap = c.synthetic.difficulty_cap;
  s.seed = derive_seed(c.seed, "synthetic-oracle");
  return s;
}

reward::LengthExponents length_exponents(const AppConfig& c) {
  reward::LengthExponents e;
  e.w_short = c.train.w_short;
  e.w_over = c.train.w_over;
  return e;
}

}  // namespace cotprune::config

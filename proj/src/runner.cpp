#include "runner.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <json.hpp>

#include "cotprune/assembly.hpp"
#include "cotprune/harness.hpp"
#include "cotprune/trainer.hpp"

namespace cotprune::runner {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::io, std::string("cannot open ") + what + ": " + path);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write: " + path);
  out << text;
}

void echo_config(const config::AppConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
  write_text(cfg.paths.out_dir + "/resolved_config.json",
             config::to_json_text(cfg));
}

bool verbose(const config::AppConfig& cfg) { return cfg.log != "quiet"; }

std::string default_path(const std::string& configured,
                         const std::string& out_dir, const char* name) {
  return configured.empty() ? out_dir + "/" + name : configured;
}

retrieval::RetrievalIndex build_or_load_index(
    const config::AppConfig& cfg,
    const std::vector<corpus::CotExample>& candidates,
    const encoder::EncoderBackend& enc) {
  const std::uint64_t hash = corpus::corpus_hash(candidates);
  if (!cfg.paths.index_cache.empty()) {
    if (auto cached = retrieval::load_index(cfg.paths.index_cache, hash))
      return std::move(*cached);
  }
  auto index = retrieval::build_index(candidates, enc);
  if (!cfg.paths.index_cache.empty())
    retrieval::save_index(cfg.paths.index_cache, index);
  return index;
}

}  // namespace

Backends make_backends(const config::AppConfig& cfg,
                       const std::vector<corpus::CotExample>& candidates,
                       const std::vector<corpus::CotExample>& questions) {
  Backends b;
  if (cfg.backend == "synthetic") {
    b.enc = std::make_unique<encoder::MockEncoder>(
        static_cast<std::size_t>(cfg.encoder.dim),
        derive_seed(cfg.seed, "encoder"));
    b.oracle = std::make_unique<oracle::SyntheticOracle>(
        config::synthetic_spec(cfg), candidates, questions);
    return b;
  }
  const std::string token = env_or(cfg.remote.auth_env.c_str(), "");
  encoder::RemoteEncoder::Options eo;
  eo.base_url = env_or("COTPRUNE_ENCODER_URL", cfg.remote.encoder_url);
  eo.timeout_ms = cfg.remote.timeout_ms;
  eo.retries = cfg.remote.retries;
  eo.auth_token = token;
  b.enc = std::make_unique<encoder::RemoteEncoder>(eo);
  oracle::RemoteOracle::Options oo;
  oo.base_url = env_or("COTPRUNE_ORACLE_URL", cfg.remote.oracle_url);
  oo.timeout_ms = cfg.remote.timeout_ms;
  oo.retries = cfg.remote.retries;
  oo.auth_token = token;
  b.oracle = std::make_unique<oracle::RemoteOracle>(oo);
  return b;
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

namespace {

struct EvolutionReply {
  std::string question;
  std::string reasoning;
};

std::string single_line(std::string text) {
  for (char& c : text)
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  std::string out;
  bool pending = false;
  for (char c : text) {
    if (c == ' ') {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

std::optional<EvolutionReply> parse_evolution_reply(const std::string& reply) {
  const auto qpos = reply.find("Question:");
  if (qpos == std::string::npos) return std::nullopt;
  auto apos = reply.find("Answer:", qpos);
  if (apos == std::string::npos) return std::nullopt;
  EvolutionReply out;
  out.question =
      single_line(std::string(trim(reply.substr(qpos + 9, apos - qpos - 9))));
  out.reasoning = single_line(std::string(trim(reply.substr(apos + 7))));
  if (out.question.empty() || out.reasoning.empty()) return std::nullopt;
  if (!contains(out.reasoning, corpus::kAnswerMarker)) return std::nullopt;
  return out;
}

}  // namespace

std::string run_prepare(const config::AppConfig& cfg,
                        const std::string& resume_manifest) {
  if (cfg.paths.seed_corpus.empty())
    raise(ErrorKind::config, "paths.seed_corpus is required for prepare");
  const auto seeds = corpus::load_corpus(cfg.paths.seed_corpus);
  if (seeds.empty()) raise(ErrorKind::invalid, "seed corpus is empty");

  fs::create_directories(cfg.paths.out_dir);
  echo_config(cfg);
  const std::string corpus_path =
      default_path(cfg.paths.corpus, cfg.paths.out_dir, "corpus.jsonl");
  const std::string questions_path =
      default_path(cfg.paths.questions, cfg.paths.out_dir, "questions.jsonl");
  const std::string candidates_path =
      default_path(cfg.paths.candidates, cfg.paths.out_dir, "candidates.jsonl");
  const std::string manifest_path = cfg.paths.out_dir + "/prepare_manifest.json";

  // Resume: ids already produced in an earlier partial run.
  std::set<std::string> done;
  std::vector<corpus::CotExample> output;
  if (!resume_manifest.empty()) {
    json m = json::parse(read_file(resume_manifest, "resume manifest"));
    for (const auto& id : m.at("done")) done.insert(id.get<std::string>());
    if (fs::exists(corpus_path)) {
      for (auto& ex : corpus::load_corpus(corpus_path))
        if (done.count(ex.id)) output.push_back(std::move(ex));
    }
  }

  const auto backends = make_backends(cfg, seeds, seeds);
  const auto gen = config::generation_params(cfg);

  auto flush_partial = [&](const std::string& note) {
    corpus::save_corpus(corpus_path, output);
    json m{{"done", json::array()}, {"note", note}};
    for (const auto& id : done) m["done"].push_back(id);
    write_text(manifest_path, m.dump(2) + "\n");
  };

  std::map<std::string, int> per_scheme;
  int skipped = 0;
  for (const auto& s : cfg.prepare.schemes) per_scheme[s] = 0;
  try {
    for (const auto& seed : seeds) {
      if (!done.count(seed.id)) {
        output.push_back(seed);
        done.insert(seed.id);
      }
      for (const auto& scheme_name : cfg.prepare.schemes) {
        const auto scheme = *corpus::origin_from_name(scheme_name);
        for (int c = 0; c < cfg.prepare.per_scheme; ++c) {
          std::string id = seed.id + "-" + scheme_name;
          if (cfg.prepare.per_scheme > 1) id += "-" + std::to_string(c + 1);
          if (done.count(id)) continue;
          const auto evo_prompt = corpus::render_evolution_prompt(seed, scheme);
          const auto evo = backends.oracle->query(evo_prompt, "", gen);
          const auto parsed = parse_evolution_reply(evo.generated);
          if (!parsed) {
            ++skipped;
            done.insert(id);  // do not retry a reply the parser rejected
            if (verbose(cfg))
              std::cerr << "[cotprune] skipping unusable evolution reply for "
                        << id << "\n";
            continue;
          }
          corpus::CotExample ex;
          ex.id = id;
          ex.origin = scheme;
          ex.question = parsed->question;
          ex.reasoning = parsed->reasoning;
          ex.answer = oracle::extract_answer(parsed->reasoning).value_or("");
          // Normalize the tail so the record satisfies the corpus contract.
          if (ex.answer.empty()) {
            ++skipped;
            done.insert(id);
            continue;
          }
          const std::string tail =
              std::string(corpus::kAnswerMarker) + " " + ex.answer + ".";
          const auto mpos = ex.reasoning.rfind(corpus::kAnswerMarker);
          ex.reasoning = ex.reasoning.substr(0, mpos) + tail;

          const auto diff_prompt = corpus::render_difficulty_prompt(ex);
          const auto diff = backends.oracle->query(diff_prompt, "", gen);
          const auto scored = corpus::parse_difficulty_reply(diff.generated);
          ex.difficulty = scored.difficulty;
          ex.steps = std::max(1, scored.steps);
          corpus::validate(ex);
          output.push_back(std::move(ex));
          done.insert(id);
          per_scheme[scheme_name]++;
        }
      }
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::transport) {
      flush_partial("interrupted by a backend failure; rerun with --resume");
      raise(ErrorKind::transport,
            std::string(e.what()) + " (partial output written; resume with " +
                manifest_path + ")");
    }
    throw;
  }

  corpus::save_corpus(corpus_path, output);
  {
    json m{{"done", json::array()}, {"note", "complete"}};
    for (const auto& id : done) m["done"].push_back(id);
    write_text(manifest_path, m.dump(2) + "\n");
  }

  const auto split = corpus::split_corpus(output, cfg.train.d_thr);
  corpus::save_corpus(questions_path, split.questions);
  corpus::save_corpus(candidates_path, split.candidates);

  std::vector<int> histogram(10, 0);
  for (const auto& ex : output) histogram[ex.difficulty - 1]++;

  json summary{{"seed_examples", seeds.size()},
               {"records", output.size()},
               {"per_scheme", per_scheme},
               {"skipped", skipped},
               {"difficulty_histogram", histogram},
               {"difficulty_threshold", cfg.train.d_thr},
               {"questions", split.questions.size()},
               {"candidates", split.candidates.size()},
               {"corpus_path", corpus_path},
               {"questions_path", questions_path},
               {"candidates_path", candidates_path}};
  return summary.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

trainer::TrainConfig train_config(const config::AppConfig& cfg) {
  trainer::TrainConfig t;
  t.epochs = cfg.train.epochs;
  t.k = cfg.train.k;
  t.token_limit = cfg.train.token_limit;
  t.t_repeat = cfg.train.t_repeat;
  t.lr = cfg.train.lr;
  t.weight_decay = cfg.train.weight_decay;
  t.ema_decay = cfg.train.ema_decay;
  t.exponents = config::length_exponents(cfg);
  t.d_thr = cfg.train.d_thr;
  t.seed = cfg.seed;
  t.hidden = cfg.train.hidden;
  t.pad = static_cast<std::size_t>(cfg.encoder.pad);
  t.checkpoint_interval = cfg.train.checkpoint_interval;
  t.grad_max_norm = cfg.train.grad_max_norm;
  t.protect_markers = cfg.train.protect_markers;
  t.count_anchor_tokens = cfg.train.count_anchor_tokens;
  t.oracle_parallelism = cfg.train.oracle_parallelism;
  t.gen = config::generation_params(cfg);
  return t;
}

double mean(const std::vector<double>& xs, std::size_t from, std::size_t to) {
  if (to <= from) return 0.0;
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += xs[i];
  return s / static_cast<double>(to - from);
}

json trend(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  const std::size_t q = std::max<std::size_t>(1, n / 4);
  return json{{"first_quarter_mean", mean(xs, 0, q)},
              {"last_quarter_mean", mean(xs, n - std::min(q, n), n)}};
}

}  // namespace

std::string run_train(const config::AppConfig& cfg,
                      const std::string& resume_path) {
  if (cfg.paths.questions.empty() || cfg.paths.candidates.empty())
    raise(ErrorKind::config,
          "paths.questions and paths.candidates are required for train");
  corpus::CorpusSplit split;
  split.threshold = cfg.train.d_thr;
  split.questions = corpus::load_corpus(cfg.paths.questions);
  split.candidates = corpus::load_corpus(cfg.paths.candidates);
  if (split.candidates.empty())
    raise(ErrorKind::invalid, "candidate pool is empty");
  const std::string anchor = read_file(cfg.paths.anchor, "anchor file");

  echo_config(cfg);
  const auto backends = make_backends(cfg, split.candidates, split.questions);
  const auto index = build_or_load_index(cfg, split.candidates, *backends.enc);
  const auto tcfg = train_config(cfg);

  std::vector<double> loss_reward, raw_acc, smoothed_reward, remaining_tokens;
  double reward_ema = 0.0;
  bool reward_ema_init = false;
  auto on_episode = [&](const trainer::EpisodeLog& log) {
    double lr_sum = 0, acc_sum = 0, tok_sum = 0;
    for (const auto& r : log.rounds) {
      lr_sum += 1.0 / (1.0 + r.breakdown.llm_loss);
      acc_sum += r.raw_acc;
      tok_sum += r.breakdown.token_count;
    }
    const double n = static_cast<double>(log.rounds.size());
    loss_reward.push_back(lr_sum / n);
    raw_acc.push_back(acc_sum / n);
    remaining_tokens.push_back(tok_sum / n);
    if (!reward_ema_init) {
      reward_ema = log.mean_reward;
      reward_ema_init = true;
    } else {
      reward_ema = 0.9 * reward_ema + 0.1 * log.mean_reward;
    }
    smoothed_reward.push_back(reward_ema);
    if (verbose(cfg) && log.step % 25 == 0)
      std::cerr << "[cotprune] step " << log.step << " mean reward "
                << log.mean_reward << "\n";
  };

  const auto result =
      trainer::train(split, tcfg, index, *backends.enc, *backends.oracle,
                     anchor, cfg.paths.out_dir, resume_path, on_episode);

  json summary{{"episodes", result.episodes},
               {"checkpoint_path", result.checkpoint_path},
               {"metrics_path", result.metrics_path},
               {"trends",
                {{"llm_loss_reward", trend(loss_reward)},
                 {"prediction_reward", trend(raw_acc)},
                 {"smoothed_reward", trend(smoothed_reward)},
                 {"remaining_tokens", trend(remaining_tokens)}}}};
  return summary.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

std::string eval_set_path(const config::AppConfig& cfg) {
  if (!cfg.paths.eval_set.empty()) return cfg.paths.eval_set;
  if (!cfg.paths.questions.empty()) return cfg.paths.questions;
  raise(ErrorKind::config, "paths.eval_set (or paths.questions) is required");
}

EvalOutcome run_eval(const config::AppConfig& cfg,
                     const std::vector<std::string>& methods_override,
                     double floor_override) {
  const auto methods_src =
      methods_override.empty() ? cfg.eval.methods : methods_override;
  std::vector<harness::Method> methods;
  for (const auto& name : methods_src) {
    auto m = harness::method_from_name(name);
    if (!m) raise(ErrorKind::config, "unknown eval method '" + name + "'");
    methods.push_back(*m);
  }
  const double floor = floor_override >= 0.0 ? floor_override : cfg.eval.floor;

  const auto dataset = corpus::load_corpus(eval_set_path(cfg));
  if (cfg.paths.candidates.empty())
    raise(ErrorKind::config, "paths.candidates is required for eval");
  const auto candidates = corpus::load_corpus(cfg.paths.candidates);
  if (candidates.empty()) raise(ErrorKind::invalid, "candidate pool is empty");
  const std::string anchor = read_file(cfg.paths.anchor, "anchor file");

  echo_config(cfg);
  const auto backends = make_backends(cfg, candidates, dataset);
  const auto index = build_or_load_index(cfg, candidates, *backends.enc);

  const bool needs_policy =
      std::any_of(methods.begin(), methods.end(),
                  [](harness::Method m) { return m == harness::Method::influx; });
  policy::PolicyParams params;
  if (needs_policy) {
    const std::string ckpt =
        default_path(cfg.paths.checkpoint, cfg.paths.out_dir, "checkpoint.bin");
    params = policy::load_checkpoint(ckpt, backends.enc->dim());
  }

  std::vector<harness::EvalReport> reports;
  json per_method = json::object();
  std::string ratio_lines;
  for (const auto m : methods) {
    harness::EvalOptions opts;
    opts.method = m;
    opts.k = cfg.train.k;
    opts.token_limit = cfg.train.token_limit;
    opts.sampled = cfg.eval.sampled;
    opts.seed = cfg.seed;
    opts.protect_markers = cfg.train.protect_markers;
    opts.pad = static_cast<std::size_t>(cfg.encoder.pad);
    opts.parallelism = cfg.eval.parallelism;
    opts.exclude_failed = cfg.eval.exclude_failed;
    opts.anchor = anchor;
    opts.bm25 = {cfg.retrieval.bm25_k1, cfg.retrieval.bm25_b};
    opts.gen = config::generation_params(cfg);
    if (cfg.eval.emit_traces && m == harness::Method::influx)
      opts.traces_dir = cfg.paths.out_dir + "/traces";

    auto report = harness::evaluate(dataset, opts, needs_policy ? &params : nullptr,
                                    index, candidates, *backends.enc,
                                    *backends.oracle);
    const std::string path = cfg.paths.out_dir + "/eval_" +
                             std::string(harness::method_name(m)) + ".json";
    harness::save_report(path, report);
    per_method[std::string(harness::method_name(m))] =
        json{{"em", report.em},
             {"mean_tokens", report.mean_tokens},
             {"shot_ratio", report.shot_ratio},
             {"total_ratio", report.total_ratio},
             {"mean_retained_difficulty", report.mean_retained_difficulty},
             {"mean_retained_steps", report.mean_retained_steps},
             {"failed", report.failed_count},
             {"report_path", path}};
    ratio_lines += std::string(harness::method_name(m)) + ": " +
                   harness::ratio_summary(report) + "\n";
    reports.push_back(std::move(report));
  }

  EvalOutcome out;
  out.table = harness::compare(reports) + ratio_lines;

  // The accuracy gate applies to the pruner run when present, otherwise to
  // the first requested method.
  double gated_em = reports.front().em;
  for (std::size_t i = 0; i < methods.size(); ++i)
    if (methods[i] == harness::Method::influx) gated_em = reports[i].em;
  out.floor_failed = floor >= 0.0 && gated_em < floor;

  json summary{{"methods", per_method},
               {"floor", floor},
               {"gated_em", gated_em},
               {"floor_failed", out.floor_failed}};
  out.summary_json = summary.dump(2) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// pruner handle
// ---------------------------------------------------------------------------

std::unique_ptr<Pruner> open_pruner(const config::AppConfig& cfg,
                                    const std::string& checkpoint_path) {
  if (cfg.paths.candidates.empty())
    raise(ErrorKind::config, "paths.candidates is required to open a pruner");
  auto p = std::make_unique<Pruner>();
  p->cfg = cfg;
  p->candidates = corpus::load_corpus(cfg.paths.candidates);
  if (p->candidates.empty()) raise(ErrorKind::invalid, "candidate pool is empty");
  p->anchor = read_file(cfg.paths.anchor, "anchor file");
  p->backends = make_backends(cfg, p->candidates, {});
  p->index = build_or_load_index(cfg, p->candidates, *p->backends.enc);
  const std::string ckpt =
      checkpoint_path.empty()
          ? default_path(cfg.paths.checkpoint, cfg.paths.out_dir, "checkpoint.bin")
          : checkpoint_path;
  p->params = policy::load_checkpoint(ckpt, p->backends.enc->dim());
  return p;
}

std::string prune_question(const Pruner& pruner, const std::string& question) {
  if (trim(question).empty())
    raise(ErrorKind::invalid, "question must be non-empty");
  const auto& cfg = pruner.cfg;
  const auto query = retrieval::query_embedding(question, *pruner.backends.enc);
  const auto ids = retrieval::retrieve_topk(pruner.index, query,
                                            static_cast<std::size_t>(cfg.train.k));
  std::map<std::string, const corpus::CotExample*> by_id;
  for (const auto& ex : pruner.candidates) by_id[ex.id] = &ex;
  std::vector<corpus::CotExample> shots;
  for (const auto& id : ids) shots.push_back(*by_id.at(id));
  const auto batch = assembly::build_shot_batch(
      shots, *pruner.backends.enc, cfg.train.protect_markers,
      static_cast<std::size_t>(cfg.encoder.pad));
  const auto trace = policy::greedy_actions(pruner.params, batch.embeddings,
                                            batch.protected_masks);
  const auto prompt =
      assembly::assemble(batch, trace, pruner.anchor, question,
                         cfg.train.token_limit, *pruner.backends.oracle);
  return prompt.full_text;
}

}  // namespace cotprune::runner

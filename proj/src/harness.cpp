#include "cotprune/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace cotprune::harness {

using nlohmann::json;

std::string_view method_name(Method m) {
  switch (m) {
    case Method::influx: return "influx";
    case Method::topk: return "topk";
    case Method::bm25: return "bm25";
    case Method::random: return "random";
    case Method::fewshot8: return "fewshot8";
    case Method::zeroshot: return "zeroshot";
  }
  return "influx";
}

std::optional<Method> method_from_name(std::string_view name) {
  for (Method m : {Method::influx, Method::topk, Method::bm25, Method::random,
                   Method::fewshot8, Method::zeroshot})
    if (method_name(m) == name) return m;
  return std::nullopt;
}

namespace {

struct CandidateStats {
  double difficulty = 0.0;
  double steps = 0.0;
};

void score_record(EvalRecord& rec, const oracle::OracleBackend& oracle,
                  const std::string& prompt, const corpus::CotExample& question,
                  const EvalOptions& opts) {
  try {
    oracle::GenerationParams gen = opts.gen;
    gen.seed = derive_seed(opts.seed, fnv1a64(question.id));
    const auto response = oracle.query(prompt, question.answer, gen);
    auto extracted = oracle::extract_answer(response.generated);
    rec.predicted = extracted.value_or("");
    rec.correct = extracted && oracle::exact_match(*extracted, question.answer);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::transport && e.kind() != ErrorKind::malformed)
      throw;
    rec.failed = true;
    rec.correct = false;
  }
}

EvalRecord run_baseline(const corpus::CotExample& question,
                        const retrieval::RetrievalIndex& index,
                        const std::vector<corpus::CotExample>& candidates,
                        const encoder::EncoderBackend& enc,
                        const oracle::OracleBackend& oracle,
                        const EvalOptions& opts) {
  EvalRecord rec;
  rec.question_id = question.id;

  std::vector<std::string> ids;
  switch (opts.method) {
    case Method::topk: {
      const auto query = retrieval::query_embedding(question.question, enc);
      ids = retrieval::retrieve_topk(index, query, static_cast<std::size_t>(opts.k));
      break;
    }
    case Method::bm25:
      ids = retrieval::retrieve_bm25(index, "Q: " + question.question + "\nA:",
                                     static_cast<std::size_t>(opts.k), opts.bm25);
      break;
    case Method::random:
      ids = retrieval::retrieve_random(index, static_cast<std::size_t>(opts.k),
                                       derive_seed(opts.seed, fnv1a64(question.id)));
      break;
    case Method::fewshot8:
    case Method::zeroshot:
      break;
    default:
      raise(ErrorKind::internal, "baseline dispatch on a policy method");
  }

  std::string prompt;
  if (opts.method == Method::zeroshot) {
    prompt = assembly::question_block(question.question);
    const int count = oracle.count_tokens(prompt);
    if (count > opts.token_limit)
      raise(ErrorKind::budget, "question alone exceeds the token limit");
    rec.raw_tokens = rec.after_shot_tokens = rec.after_token_tokens = count;
    rec.final_tokens = count;
    score_record(rec, oracle, prompt, question, opts);
    return rec;
  }

  std::map<std::string, const corpus::CotExample*> by_id;
  for (const auto& ex : candidates) by_id[ex.id] = &ex;
  std::vector<std::string> texts;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      raise(ErrorKind::internal, "retrieved id '" + id + "' not in the pool");
    texts.push_back(corpus::render(*it->second));
  }

  assembly::PrunedPrompt pp;
  pp.anchor = opts.anchor;
  pp.question_block = assembly::question_block(question.question);
  pp.retained_ids = ids;
  pp.retained_texts = texts;
  {
    std::string full;
    for (const auto& t : pp.retained_texts) {
      full += t;
      full += '\n';
    }
    full += pp.anchor + "\n\n" + pp.question_block;
    pp.full_text = full;
  }
  pp.token_count = oracle.count_tokens(pp.full_text);
  pp.raw_tokens = pp.after_shot_tokens = pp.after_token_tokens = pp.token_count;
  assembly::enforce_budget(pp, opts.token_limit, oracle);

  rec.retained_ids = pp.retained_ids;
  rec.raw_tokens = pp.raw_tokens;
  rec.after_shot_tokens = pp.after_shot_tokens;
  rec.after_token_tokens = pp.after_token_tokens;
  rec.final_tokens = pp.token_count;
  score_record(rec, oracle, pp.full_text, question, opts);
  return rec;
}

void write_trace_file(const std::string& dir, const corpus::CotExample& question,
                      const assembly::ShotBatch& batch,
                      const policy::ActionTrace& trace,
                      const assembly::PrunedPrompt& prompt) {
  std::filesystem::create_directories(dir);
  json pruned_words = json::array();
  for (const auto& td : trace.token_stage) {
    const auto& tok = batch.tokenized[td.shot];
    std::vector<std::uint8_t> has_tokens(tok.word_spans.size(), 0);
    std::vector<std::uint8_t> any_kept(tok.word_spans.size(), 0);
    for (std::size_t t = 0; t < tok.tokens.size(); ++t) {
      has_tokens[tok.token_word[t]] = 1;
      if (td.actions[t]) any_kept[tok.token_word[t]] = 1;
    }
    json words = json::array();
    const auto& text = batch.rendered[td.shot];
    for (std::size_t w = 0; w < tok.word_spans.size(); ++w) {
      if (has_tokens[w] && !any_kept[w]) {
        const auto [b, e] = tok.word_spans[w];
        words.push_back(text.substr(b, e - b));
      }
    }
    pruned_words.push_back(
        {{"shot_id", batch.examples[td.shot].id}, {"words", words}});
  }
  json j{{"question_id", question.id},
         {"retained_ids", prompt.retained_ids},
         {"pruned_words", pruned_words},
         {"raw_tokens", prompt.raw_tokens},
         {"after_shot_tokens", prompt.after_shot_tokens},
         {"after_token_tokens", prompt.after_token_tokens},
         {"final_tokens", prompt.token_count},
         {"dropped_for_budget", prompt.dropped_for_budget}};
  std::ofstream out(dir + "/" + question.id + ".json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

}  // namespace

EvalRecord run_inference(const corpus::CotExample& question,
                         const policy::PolicyParams& params,
                         const retrieval::RetrievalIndex& index,
                         const std::vector<corpus::CotExample>& candidates,
                         const encoder::EncoderBackend& enc,
                         const oracle::OracleBackend& oracle,
                         const EvalOptions& opts) {
  EvalRecord rec;
  rec.question_id = question.id;

  const auto query = retrieval::query_embedding(question.question, enc);
  const auto ids =
      retrieval::retrieve_topk(index, query, static_cast<std::size_t>(opts.k));
  std::map<std::string, const corpus::CotExample*> by_id;
  for (const auto& ex : candidates) by_id[ex.id] = &ex;
  std::vector<corpus::CotExample> shots;
  for (const auto& id : ids) shots.push_back(*by_id.at(id));

  const auto batch =
      assembly::build_shot_batch(shots, enc, opts.protect_markers, opts.pad);
  const auto trace =
      opts.sampled
          ? policy::sample_actions(params, batch.embeddings, batch.protected_masks,
                                   derive_seed(opts.seed, fnv1a64(question.id)))
          : policy::greedy_actions(params, batch.embeddings, batch.protected_masks);
  const auto prompt = assembly::assemble(batch, trace, opts.anchor,
                                         question.question, opts.token_limit,
                                         oracle);
  rec.retained_ids = prompt.retained_ids;
  rec.raw_tokens = prompt.raw_tokens;
  rec.after_shot_tokens = prompt.after_shot_tokens;
  rec.after_token_tokens = prompt.after_token_tokens;
  rec.final_tokens = prompt.token_count;
  score_record(rec, oracle, prompt.full_text, question, opts);

  if (!opts.traces_dir.empty())
    write_trace_file(opts.traces_dir, question, batch, trace, prompt);
  return rec;
}

EvalReport evaluate(const std::vector<corpus::CotExample>& dataset,
                    const EvalOptions& opts, const policy::PolicyParams* params,
                    const retrieval::RetrievalIndex& index,
                    const std::vector<corpus::CotExample>& candidates,
                    const encoder::EncoderBackend& enc,
                    const oracle::OracleBackend& oracle) {
  if (dataset.empty()) raise(ErrorKind::invalid, "evaluation set is empty");
  if (opts.method == Method::influx && params == nullptr)
    raise(ErrorKind::invalid, "pruner evaluation requires trained parameters");

  EvalReport report;
  report.method = std::string(method_name(opts.method));
  report.records.resize(dataset.size());

  auto eval_one = [&](std::size_t i) {
    const auto& question = dataset[i];
    if (opts.method == Method::influx)
      report.records[i] = run_inference(question, *params, index, candidates,
                                        enc, oracle, opts);
    else
      report.records[i] =
          run_baseline(question, index, candidates, enc, oracle, opts);
  };

  const int workers =
      std::max(1, std::min<int>(opts.parallelism,
                                static_cast<int>(dataset.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < dataset.size(); ++i) eval_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> failed{false};
    std::string error_message;
    std::mutex error_mutex;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (!failed.load()) {
          const std::size_t i = next.fetch_add(1);
          if (i >= dataset.size()) return;
          try {
            eval_one(i);
          } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mutex);
            failed.store(true);
            if (error_message.empty()) error_message = e.what();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failed.load()) raise(ErrorKind::internal, error_message);
  }

  // Aggregates.
  std::map<std::string, CandidateStats> stats;
  for (const auto& ex : candidates)
    stats[ex.id] = {static_cast<double>(ex.difficulty),
                    static_cast<double>(ex.steps)};
  long correct = 0;
  long raw_sum = 0, shot_sum = 0, final_sum = 0;
  double diff_sum = 0.0, steps_sum = 0.0;
  long retained_instances = 0;
  for (const auto& rec : report.records) {
    if (rec.failed) ++report.failed_count;
    if (rec.correct) ++correct;
    raw_sum += rec.raw_tokens;
    shot_sum += rec.after_shot_tokens;
    final_sum += rec.final_tokens;
    for (const auto& id : rec.retained_ids) {
      auto it = stats.find(id);
      if (it == stats.end()) continue;
      diff_sum += it->second.difficulty;
      steps_sum += it->second.steps;
      ++retained_instances;
    }
  }
  const long denom =
      static_cast<long>(report.records.size()) -
      (opts.exclude_failed ? report.failed_count : 0);
  report.em = denom > 0 ? static_cast<double>(correct) / static_cast<double>(denom)
                        : 0.0;
  report.mean_tokens = report.records.empty()
                           ? 0.0
                           : static_cast<double>(final_sum) /
                                 static_cast<double>(report.records.size());
  report.shot_ratio = shot_sum > 0 ? static_cast<double>(raw_sum) /
                                         static_cast<double>(shot_sum)
                                   : 1.0;
  report.total_ratio = final_sum > 0 ? static_cast<double>(raw_sum) /
                                           static_cast<double>(final_sum)
                                     : 1.0;
  if (retained_instances > 0) {
    report.mean_retained_difficulty =
        diff_sum / static_cast<double>(retained_instances);
    report.mean_retained_steps =
        steps_sum / static_cast<double>(retained_instances);
  }
  return report;
}

std::string compare(const std::vector<EvalReport>& reports) {
  if (reports.empty()) raise(ErrorKind::invalid, "no reports to compare");
  std::ostringstream os;
  os << std::left << std::setw(10) << "method" << std::right << std::setw(8)
     << "shots" << std::setw(14) << "mean_tokens" << std::setw(9) << "EM%"
     << "\n";
  for (const auto& r : reports) {
    double shots = 0.0;
    for (const auto& rec : r.records) shots += static_cast<double>(rec.retained_ids.size());
    if (!r.records.empty()) shots /= static_cast<double>(r.records.size());
    os << std::left << std::setw(10) << r.method << std::right << std::fixed
       << std::setprecision(1) << std::setw(8) << shots << std::setw(14)
       << r.mean_tokens << std::setprecision(2) << std::setw(9) << r.em * 100.0
       << "\n";
  }
  return os.str();
}

std::string ratio_summary(const EvalReport& r) {
  long raw = 0, shot = 0, final_sum = 0;
  for (const auto& rec : r.records) {
    raw += rec.raw_tokens;
    shot += rec.after_shot_tokens;
    final_sum += rec.final_tokens;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "tokens raw " << raw << " -> after shot stage " << shot
     << " -> final " << final_sum << " | shot ratio " << r.shot_ratio
     << "x | total ratio " << r.total_ratio << "x";
  return os.str();
}

std::string report_to_json(const EvalReport& r) {
  json records = json::array();
  for (const auto& rec : r.records) {
    records.push_back({{"question_id", rec.question_id},
                       {"retained_ids", rec.retained_ids},
                       {"raw_tokens", rec.raw_tokens},
                       {"after_shot_tokens", rec.after_shot_tokens},
                       {"after_token_tokens", rec.after_token_tokens},
                       {"final_tokens", rec.final_tokens},
                       {"predicted", rec.predicted},
                       {"correct", rec.correct},
                       {"failed", rec.failed}});
  }
  json j{{"method", r.method},
         {"em", r.em},
         {"mean_tokens", r.mean_tokens},
         {"shot_ratio", r.shot_ratio},
         {"total_ratio", r.total_ratio},
         {"mean_retained_difficulty", r.mean_retained_difficulty},
         {"mean_retained_steps", r.mean_retained_steps},
         {"failed_count", r.failed_count},
         {"records", records}};
  return j.dump(2) + "\n";
}

void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write report: " + path);
  out << report_to_json(report);
}

}  // namespace cotprune::harness

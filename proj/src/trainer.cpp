#include "cotprune/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace cotprune::trainer {

using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

void axpy(policy::PolicyParams& acc, const policy::PolicyParams& g, double scale) {
  auto av = policy::param_views(acc);
  auto gv = policy::param_views(const_cast<policy::PolicyParams&>(g));
  for (std::size_t i = 0; i < av.size(); ++i)
    for (std::size_t j = 0; j < av[i].size(); ++j) av[i][j] += scale * gv[i][j];
}

bool all_finite(const policy::PolicyParams& p) {
  for (auto view : policy::param_views(const_cast<policy::PolicyParams&>(p)))
    for (double x : view)
      if (!std::isfinite(x)) return false;
  return true;
}

double grad_norm(const policy::PolicyParams& g) {
  double s = 0.0;
  for (auto view : policy::param_views(const_cast<policy::PolicyParams&>(g)))
    for (double x : view) s += x * x;
  return std::sqrt(s);
}

}  // namespace

OptimState init_optim(const policy::PolicyParams& params) {
  OptimState s;
  s.m = policy::zeros_like(params);
  s.v = policy::zeros_like(params);
  s.step = 0;
  return s;
}

QuestionContext prepare_question(const corpus::CotExample& question,
                                 const TrainConfig& cfg,
                                 const retrieval::RetrievalIndex& index,
                                 const std::vector<corpus::CotExample>& candidates,
                                 const encoder::EncoderBackend& enc) {
  const auto query = retrieval::query_embedding(question.question, enc);
  const auto ids = retrieval::retrieve_topk(index, query, static_cast<std::size_t>(cfg.k));
  std::vector<corpus::CotExample> shots;
  shots.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = std::find_if(candidates.begin(), candidates.end(),
                           [&](const corpus::CotExample& ex) { return ex.id == id; });
    if (it == candidates.end())
      raise(ErrorKind::internal, "retrieved id '" + id + "' not in the candidate pool");
    shots.push_back(*it);
  }
  QuestionContext ctx;
  ctx.batch = assembly::build_shot_batch(shots, enc, cfg.protect_markers, cfg.pad);
  return ctx;
}

EpisodeResult train_episode(const corpus::CotExample& question,
                            const QuestionContext& ctx,
                            const policy::PolicyParams& params,
                            const TrainConfig& cfg,
                            const oracle::OracleBackend& oracle,
                            const std::string& anchor,
                            std::uint64_t episode_seed) {
  if (question.difficulty > cfg.d_thr)
    raise(ErrorKind::invalid,
          "question '" + question.id + "' has difficulty " +
              std::to_string(question.difficulty) +
              " above the training threshold " + std::to_string(cfg.d_thr));

  struct Round {
    policy::ActionTrace trace;
    assembly::PrunedPrompt prompt;
    oracle::OracleResponse response;
  };
  std::vector<Round> rounds(static_cast<std::size_t>(cfg.t_repeat));

  // Sampling and assembly are deterministic per (episode_seed, round); the
  // oracle queries are safe to run concurrently.
  auto run_round = [&](std::size_t j) {
    Round& r = rounds[j];
    r.trace = policy::sample_actions(params, ctx.batch.embeddings,
                                     ctx.batch.protected_masks,
                                     derive_seed(episode_seed, j));
    r.prompt = assembly::assemble(ctx.batch, r.trace, anchor, question.question,
                                  cfg.token_limit, oracle);
    oracle::GenerationParams gen = cfg.gen;
    gen.seed = derive_seed(episode_seed, 0x9000 + j);
    r.response = oracle.query(r.prompt.full_text, question.answer, gen);
  };
  const int workers = std::min<int>(cfg.oracle_parallelism, cfg.t_repeat);
  if (workers <= 1) {
    for (std::size_t j = 0; j < rounds.size(); ++j) run_round(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> failed{false};
    std::string error_message;
    std::mutex error_mutex;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          const std::size_t j = next.fetch_add(1);
          if (j >= rounds.size() || failed.load()) return;
          try {
            run_round(j);
          } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mutex);
            failed.store(true);
            if (error_message.empty()) error_message = e.what();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failed.load()) raise(ErrorKind::transport, error_message);
  }

  // Sequential pass: EMA smoothing couples rounds in order.
  EpisodeResult result;
  result.grad = policy::zeros_like(params);
  result.log.question_id = question.id;
  reward::EmaState ema{.value = 0.0, .decay = cfg.ema_decay, .initialized = false};
  double reward_sum = 0.0;
  for (std::size_t j = 0; j < rounds.size(); ++j) {
    const Round& r = rounds[j];
    const double raw_acc =
        reward::accuracy_outcome(r.response.generated, question.answer);
    ema = reward::ema_update(ema, raw_acc);
    const int t = cfg.count_anchor_tokens
                      ? r.prompt.token_count
                      : std::max(0, r.prompt.token_count - r.prompt.anchor_tokens);
    const auto breakdown = reward::compute_reward(
        r.response.answer_loss, ema.value, t, cfg.token_limit, cfg.exponents);
    const auto g = policy::log_prob_grad(params, ctx.batch.embeddings, r.trace);
    axpy(result.grad, g, breakdown.total / static_cast<double>(cfg.t_repeat));
    reward_sum += breakdown.total;

    RoundLog log;
    log.breakdown = breakdown;
    log.raw_acc = raw_acc;
    log.retained_shots = r.trace.retained_shots();
    log.raw_tokens = r.prompt.raw_tokens;
    log.after_shot_tokens = r.prompt.after_shot_tokens;
    log.after_token_tokens = r.prompt.after_token_tokens;
    result.log.rounds.push_back(log);
  }
  result.log.mean_reward = reward_sum / static_cast<double>(cfg.t_repeat);
  return result;
}

EpisodeResult train_episode(const corpus::CotExample& question,
                            const policy::PolicyParams& params,
                            const TrainConfig& cfg,
                            const retrieval::RetrievalIndex& index,
                            const std::vector<corpus::CotExample>& candidates,
                            const encoder::EncoderBackend& enc,
                            const oracle::OracleBackend& oracle,
                            const std::string& anchor,
                            std::uint64_t episode_seed) {
  const auto ctx = prepare_question(question, cfg, index, candidates, enc);
  return train_episode(question, ctx, params, cfg, oracle, anchor, episode_seed);
}

void apply_update(policy::PolicyParams& params, const policy::PolicyGrad& grad,
                  OptimState& optim, double lr, double weight_decay) {
  if (!all_finite(grad)) {
    std::cerr << "[cotprune] warning: non-finite gradient, update skipped\n";
    return;
  }
  optim.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(optim.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(optim.step));
  auto pv = policy::param_views(params);
  auto gv = policy::param_views(const_cast<policy::PolicyGrad&>(grad));
  auto mv = policy::param_views(optim.m);
  auto vv = policy::param_views(optim.v);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    for (std::size_t j = 0; j < pv[i].size(); ++j) {
      const double g = gv[i][j];
      mv[i][j] = kBeta1 * mv[i][j] + (1.0 - kBeta1) * g;
      vv[i][j] = kBeta2 * vv[i][j] + (1.0 - kBeta2) * g * g;
      const double mhat = mv[i][j] / bc1;
      const double vhat = vv[i][j] / bc2;
      // Ascent on the reward; decay stays decoupled from the moments.
      pv[i][j] += lr * mhat / (std::sqrt(vhat) + kEps);
      pv[i][j] -= lr * weight_decay * pv[i][j];
    }
  }
}

// ---------------------------------------------------------------------------
// Resume state: full-precision parameters + optimizer moments + cursor, so a
// resumed run continues bit-for-bit where it stopped. The float32 checkpoint
// next to it is the interchange artifact for inference.
// ---------------------------------------------------------------------------

namespace {

constexpr char kResumeMagic[4] = {'C', 'P', 'R', 'S'};
constexpr std::uint32_t kResumeVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(buf, v);
}
std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}
std::uint64_t get_u64(const std::string& buf, std::size_t& pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 8;
  return v;
}
double get_f64(const std::string& buf, std::size_t& pos) {
  std::uint64_t v = get_u64(buf, pos);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

struct ResumeState {
  policy::PolicyParams params;
  OptimState optim;
  long episodes = 0;
  int epoch = 0;       // epoch to continue in
  int position = 0;    // next index within the epoch's shuffled order
};

std::uint64_t run_fingerprint(const TrainConfig& cfg, std::size_t n_questions,
                              std::size_t dim) {
  std::uint64_t h = fnv1a64("train-run-v1");
  h = fnv1a64_mix(h, cfg.seed);
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(cfg.epochs));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(cfg.k));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(cfg.t_repeat));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(cfg.hidden));
  h = fnv1a64_mix(h, n_questions);
  h = fnv1a64_mix(h, dim);
  return h;
}

void save_resume(const std::string& path, const ResumeState& st,
                 std::uint64_t fingerprint) {
  std::string buf;
  buf.append(kResumeMagic, 4);
  put_u32(buf, kResumeVersion);
  put_u64(buf, fingerprint);
  put_u32(buf, static_cast<std::uint32_t>(st.params.dim));
  put_u32(buf, static_cast<std::uint32_t>(st.params.hidden));
  put_u64(buf, static_cast<std::uint64_t>(st.episodes));
  put_u32(buf, static_cast<std::uint32_t>(st.epoch));
  put_u32(buf, static_cast<std::uint32_t>(st.position));
  put_u64(buf, static_cast<std::uint64_t>(st.optim.step));
  for (const auto* p : {&st.params, &st.optim.m, &st.optim.v})
    for (auto view : policy::param_views(const_cast<policy::PolicyParams&>(*p)))
      for (double w : view) put_f64(buf, w);
  put_u64(buf, fnv1a64(buf));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write resume file: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

ResumeState load_resume(const std::string& path, std::uint64_t fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::io, "cannot open resume file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 + 8 || std::memcmp(buf.data(), kResumeMagic, 4) != 0)
    raise(ErrorKind::parse, "not a resume file: " + path);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(buf[buf.size() - 8 + i]))
              << (8 * i);
  if (fnv1a64(std::string_view(buf).substr(0, buf.size() - 8)) != stored)
    raise(ErrorKind::parse, "resume file checksum mismatch: " + path);
  std::size_t pos = 4;
  if (get_u32(buf, pos) != kResumeVersion)
    raise(ErrorKind::parse, "unsupported resume file version");
  if (get_u64(buf, pos) != fingerprint)
    raise(ErrorKind::invalid,
          "resume file was produced by a different run configuration");
  ResumeState st;
  const std::uint32_t dim = get_u32(buf, pos);
  const std::uint32_t hidden = get_u32(buf, pos);
  st.episodes = static_cast<long>(get_u64(buf, pos));
  st.epoch = static_cast<int>(get_u32(buf, pos));
  st.position = static_cast<int>(get_u32(buf, pos));
  const long step = static_cast<long>(get_u64(buf, pos));
  policy::PolicyParams proto;
  proto.dim = dim;
  proto.hidden = hidden;
  st.params = policy::zeros_like(proto);
  st.optim.m = policy::zeros_like(proto);
  st.optim.v = policy::zeros_like(proto);
  st.optim.step = step;
  for (auto* p : {&st.params, &st.optim.m, &st.optim.v})
    for (auto view : policy::param_views(*p))
      for (double& w : view) w = get_f64(buf, pos);
  return st;
}

json round_to_json(const RoundLog& r) {
  return json{{"llm_loss", r.breakdown.llm_loss},
              {"acc", r.breakdown.acc},
              {"raw_acc", r.raw_acc},
              {"token_count", r.breakdown.token_count},
              {"token_limit", r.breakdown.token_limit},
              {"length_factor", r.breakdown.length_factor},
              {"total", r.breakdown.total},
              {"retained_shots", r.retained_shots},
              {"raw_tokens", r.raw_tokens},
              {"after_shot_tokens", r.after_shot_tokens},
              {"after_token_tokens", r.after_token_tokens}};
}

}  // namespace

TrainResult train(const corpus::CorpusSplit& split, const TrainConfig& cfg,
                  const retrieval::RetrievalIndex& index,
                  const encoder::EncoderBackend& enc,
                  const oracle::OracleBackend& oracle,
                  const std::string& anchor, const std::string& out_dir,
                  const std::string& resume_path,
                  const EpisodeCallback& on_episode) {
  std::vector<const corpus::CotExample*> questions;
  for (const auto& q : split.questions)
    if (q.difficulty <= cfg.d_thr) questions.push_back(&q);
  if (questions.empty())
    raise(ErrorKind::invalid,
          "no training questions at or below difficulty threshold " +
              std::to_string(cfg.d_thr));

  std::filesystem::create_directories(out_dir);
  const std::string checkpoint_path = out_dir + "/checkpoint.bin";
  const std::string resume_out = out_dir + "/resume.bin";
  const std::string metrics_path = out_dir + "/metrics.jsonl";

  const std::uint64_t fingerprint =
      run_fingerprint(cfg, questions.size(), enc.dim());

  // Frozen-backend contract: these hashes must match after the run.
  const std::uint64_t enc_hash = enc.state_hash();
  const std::uint64_t oracle_hash = oracle.state_hash();

  policy::PolicyParams params;
  OptimState optim;
  long episodes = 0;
  int start_epoch = 0, start_pos = 0;
  bool resumed = false;
  if (!resume_path.empty()) {
    ResumeState st = load_resume(resume_path, fingerprint);
    params = std::move(st.params);
    optim = std::move(st.optim);
    episodes = st.episodes;
    start_epoch = st.epoch;
    start_pos = st.position;
    resumed = true;
  } else {
    params = policy::init_params(enc.dim(), static_cast<std::size_t>(cfg.hidden),
                                 cfg.seed);
    optim = init_optim(params);
  }

  std::ofstream metrics(metrics_path, resumed ? std::ios::app : std::ios::trunc);
  if (!metrics) raise(ErrorKind::io, "cannot write metrics log: " + metrics_path);

  // Embedding batches are reusable across epochs: the backends are frozen.
  std::vector<std::unique_ptr<QuestionContext>> contexts(questions.size());

  auto save_state = [&](int epoch, int position) {
    policy::save_checkpoint(checkpoint_path, params);
    ResumeState st;
    st.params = params;
    st.optim = optim;
    st.episodes = episodes;
    st.epoch = epoch;
    st.position = position;
    save_resume(resume_out, st, fingerprint);
  };

  const std::uint64_t shuffle_base = derive_seed(cfg.seed, "epoch-shuffle");
  const std::uint64_t episode_base = derive_seed(cfg.seed, "episode");
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(questions.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(shuffle_base, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = shuffle_rng.next_below(i);
      std::swap(order[i - 1], order[j]);
    }
    const int from = epoch == start_epoch ? start_pos : 0;
    for (std::size_t pos = static_cast<std::size_t>(from); pos < order.size(); ++pos) {
      const std::size_t qi = order[pos];
      const corpus::CotExample& question = *questions[qi];
      if (!contexts[qi]) {
        contexts[qi] = std::make_unique<QuestionContext>(
            prepare_question(question, cfg, index, split.candidates, enc));
      }
      const std::uint64_t episode_seed = derive_seed(
          derive_seed(episode_base, static_cast<std::uint64_t>(epoch)),
          fnv1a64(question.id));
      auto result = train_episode(question, *contexts[qi], params, cfg, oracle,
                                  anchor, episode_seed);
      if (cfg.grad_max_norm > 0.0) {
        const double norm = grad_norm(result.grad);
        if (norm > cfg.grad_max_norm) {
          auto gv = policy::param_views(result.grad);
          const double scale = cfg.grad_max_norm / norm;
          for (auto view : gv)
            for (double& g : view) g *= scale;
        }
      }
      apply_update(params, result.grad, optim, cfg.lr, cfg.weight_decay);
      ++episodes;

      result.log.epoch = epoch;
      result.log.step = episodes;
      json line{{"step", episodes},
                {"epoch", epoch},
                {"question_id", question.id},
                {"mean_reward", result.log.mean_reward},
                {"rounds", json::array()}};
      for (const auto& r : result.log.rounds) line["rounds"].push_back(round_to_json(r));
      metrics << line.dump() << "\n";
      metrics.flush();
      if (on_episode) on_episode(result.log);

      if (episodes % cfg.checkpoint_interval == 0)
        save_state(epoch, static_cast<int>(pos) + 1);
    }
  }
  save_state(cfg.epochs, 0);

  if (enc.state_hash() != enc_hash || oracle.state_hash() != oracle_hash)
    raise(ErrorKind::internal, "frozen backend state changed during training");

  TrainResult out;
  out.params = std::move(params);
  out.checkpoint_path = checkpoint_path;
  out.metrics_path = metrics_path;
  out.episodes = episodes;
  return out;
}

}  // namespace cotprune::trainer

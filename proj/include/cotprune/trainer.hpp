#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cotprune/assembly.hpp"
#include "cotprune/corpus.hpp"
#include "cotprune/encoder.hpp"
#include "cotprune/oracle.hpp"
#include "cotprune/policy.hpp"
#include "cotprune/retrieval.hpp"
#include "cotprune/reward.hpp"

namespace cotprune::trainer {

struct TrainConfig {
  int epochs = 3;
  int k = 40;             // input shots per question
  int token_limit = 2048; // T
  int t_repeat = 10;
  double lr = 1e-5;
  double weight_decay = 1e-2;
  double ema_decay = 0.9;
  reward::LengthExponents exponents{};
  int d_thr = 2;
  std::uint64_t seed = 1;
  int hidden = 512;
  std::size_t pad = encoder::kDefaultPad;
  int checkpoint_interval = 25;
  double grad_max_norm = 0.0;  // 0 disables clipping
  bool protect_markers = true;
  bool count_anchor_tokens = true;
  int oracle_parallelism = 1;
  oracle::GenerationParams gen{};
};

// Adam moments with decoupled weight decay; shaped like the policy.
struct OptimState {
  policy::PolicyParams m;
  policy::PolicyParams v;
  long step = 0;
};

OptimState init_optim(const policy::PolicyParams& params);

struct RoundLog {
  reward::RewardBreakdown breakdown;
  double raw_acc = 0.0;  // unsmoothed outcome for this round
  std::size_t retained_shots = 0;
  int raw_tokens = 0;
  int after_shot_tokens = 0;
  int after_token_tokens = 0;
};

struct EpisodeLog {
  std::string question_id;
  int epoch = 0;
  long step = 0;
  std::vector<RoundLog> rounds;
  double mean_reward = 0.0;
};

struct EpisodeResult {
  policy::PolicyGrad grad;  // mean over rounds of R_j * grad(log pi_j)
  EpisodeLog log;
};

// Retrieves and embeds the question's shot batch once (reused across rounds).
struct QuestionContext {
  assembly::ShotBatch batch;
};

QuestionContext prepare_question(const corpus::CotExample& question,
                                 const TrainConfig& cfg,
                                 const retrieval::RetrievalIndex& index,
                                 const std::vector<corpus::CotExample>& candidates,
                                 const encoder::EncoderBackend& enc);

// One question: t_repeat sample -> assemble -> query -> reward rounds, with
// the accuracy term EMA-smoothed across rounds. Throws Error{invalid} when
// the question's difficulty exceeds the configured threshold.
EpisodeResult train_episode(const corpus::CotExample& question,
                            const QuestionContext& ctx,
                            const policy::PolicyParams& params,
                            const TrainConfig& cfg,
                            const oracle::OracleBackend& oracle,
                            const std::string& anchor,
                            std::uint64_t episode_seed);

// Convenience overload that builds the context itself.
EpisodeResult train_episode(const corpus::CotExample& question,
                            const policy::PolicyParams& params,
                            const TrainConfig& cfg,
                            const retrieval::RetrievalIndex& index,
                            const std::vector<corpus::CotExample>& candidates,
                            const encoder::EncoderBackend& enc,
                            const oracle::OracleBackend& oracle,
                            const std::string& anchor,
                            std::uint64_t episode_seed);

// Gradient-ascent Adam step with decoupled weight decay. Non-finite gradients
// skip the update (a warning is logged).
void apply_update(policy::PolicyParams& params, const policy::PolicyGrad& grad,
                  OptimState& optim, double lr, double weight_decay);

struct TrainResult {
  policy::PolicyParams params;
  std::string checkpoint_path;
  std::string metrics_path;
  long episodes = 0;
};

using EpisodeCallback = std::function<void(const EpisodeLog&)>;

// Full loop: per-epoch shuffled question order, per-episode updates, periodic
// checkpoints plus a full-precision resume file. Backends are never mutated.
TrainResult train(const corpus::CorpusSplit& split, const TrainConfig& cfg,
                  const retrieval::RetrievalIndex& index,
                  const encoder::EncoderBackend& enc,
                  const oracle::OracleBackend& oracle,
                  const std::string& anchor, const std::string& out_dir,
                  const std::string& resume_path = {},
                  const EpisodeCallback& on_episode = {});

}  // namespace cotprune::trainer

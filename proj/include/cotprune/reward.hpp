#pragma once

#include <string_view>

#include "cotprune/common.hpp"

namespace cotprune::reward {

// Accuracy outcomes: correct, wrong-but-parseable, format-destroyed.
inline constexpr double kAccCorrect = 1.0;
inline constexpr double kAccIncorrect = 0.0;
inline constexpr double kAccIrrelevant = -0.1;

struct LengthExponents {
  double w_short = 1.0;   // applied when t <= T, must be > 0
  double w_over = -1.0;   // applied when t > T, must be < 0
  double zero_floor = 1e-6;
};

struct RewardBreakdown {
  double llm_loss = 0.0;      // >= 0
  double acc = 0.0;           // one of {1, 0, -0.1}, possibly EMA-smoothed
  int token_count = 0;        // t
  int token_limit = 1;        // T
  double length_factor = 1.0; // [t/T]^w, piecewise
  double total = 0.0;         // (1/(1+loss) + acc) * length_factor
};

// 1.0 / 0.0 / -0.1 depending on whether the generated text carries a
// parseable answer and whether it matches the gold answer.
double accuracy_outcome(std::string_view generated, std::string_view gold_answer);

// (t/T)^w_short for t <= T, (t/T)^w_over for t > T; t = 0 maps to the floor.
double length_factor(int t, int T, const LengthExponents& exps = {});

RewardBreakdown compute_reward(double llm_loss, double acc, int t, int T,
                               const LengthExponents& exps = {});

struct EmaState {
  double value = 0.0;
  double decay = 0.9;  // in (0, 1)
  bool initialized = false;
};

// First observation sets the value; afterwards
// value' = decay * value + (1 - decay) * observation.
EmaState ema_update(EmaState state, double observation);

}  // namespace cotprune::reward

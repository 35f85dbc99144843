#include "cotprune/reward.hpp"

#include <cmath>

#include "cotprune/oracle.hpp"

namespace cotprune::reward {

double accuracy_outcome(std::string_view generated, std::string_view gold_answer) {
  auto extracted = oracle::extract_answer(generated);
  if (!extracted) return kAccIrrelevant;
  return oracle::exact_match(*extracted, gold_answer) ? kAccCorrect : kAccIncorrect;
}

double length_factor(int t, int T, const LengthExponents& exps) {
  if (t < 0) raise(ErrorKind::invalid, "token count must be >= 0");
  if (T < 1) raise(ErrorKind::invalid, "token limit must be >= 1");
  if (!(exps.w_short > 0.0))
    raise(ErrorKind::invalid, "w_short must be > 0");
  if (!(exps.w_over < 0.0))
    raise(ErrorKind::invalid, "w_over must be < 0");
  if (t == 0) return exps.zero_floor;
  const double ratio = static_cast<double>(t) / static_cast<double>(T);
  return t <= T ? std::pow(ratio, exps.w_short) : std::pow(ratio, exps.w_over);
}

RewardBreakdown compute_reward(double llm_loss, double acc, int t, int T,
                               const LengthExponents& exps) {
  if (llm_loss < 0.0)
    raise(ErrorKind::invalid, "llm loss must be nonnegative");
  RewardBreakdown out;
  out.llm_loss = llm_loss;
  out.acc = acc;
  out.token_count = t;
  out.token_limit = T;
  out.length_factor = length_factor(t, T, exps);
  out.total = (1.0 / (1.0 + llm_loss) + acc) * out.length_factor;
  if (!std::isfinite(out.total))
    raise(ErrorKind::invalid, "reward is non-finite");
  return out;
}

EmaState ema_update(EmaState state, double observation) {
  if (!state.initialized) {
    state.value = observation;
    state.initialized = true;
    return state;
  }
  state.value = state.decay * state.value + (1.0 - state.decay) * observation;
  return state;
}

}  // namespace cotprune::reward

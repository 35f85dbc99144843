#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cotprune/common.hpp"
#include "cotprune/encoder.hpp"

namespace cotprune::policy {

// Numerically stable logistic helpers.
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double log_sigmoid(double z) {
  return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}
// log Bernoulli(action; sigmoid(logit))
inline double bernoulli_log_prob(bool action, double logit) {
  return action ? log_sigmoid(logit) : log_sigmoid(-logit);
}

// Exact Gaussian-CDF GELU (the tanh approximation is not used).
inline double gelu(double z) { return 0.5 * z * std::erfc(-z * M_SQRT1_2); }
inline double gelu_prime(double z) {
  const double cdf = 0.5 * std::erfc(-z * M_SQRT1_2);
  const double pdf = std::exp(-0.5 * z * z) * 0.3989422804014327;  // 1/sqrt(2*pi)
  return cdf + z * pdf;
}

// One two-layer feed-forward stage: dim -> hidden (GELU) -> 1.
struct MlpStage {
  std::vector<double> w1;  // hidden x dim, row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  std::vector<double> b2;  // single output bias
};

struct PolicyParams {
  std::size_t dim = 0;
  std::size_t hidden = 0;
  MlpStage shot;
  MlpStage token;
};

// Gradients share the parameter layout.
using PolicyGrad = PolicyParams;

PolicyParams zeros_like(const PolicyParams& p);

// Flat views over all parameter arrays, in a fixed order (shot then token,
// w1/b1/w2/b2). Used by the optimizer and by finite-difference checks.
std::vector<std::span<double>> param_views(PolicyParams& p);
std::vector<std::span<const double>> param_views(const PolicyParams& p);
std::size_t param_count(const PolicyParams& p);

double stage_logit(const MlpStage& stage, std::span<const double> x,
                   std::size_t dim, std::size_t hidden);

// Token-stage decisions for one retained shot.
struct TokenDecisions {
  std::size_t shot = 0;                    // index into the embedding batch
  std::vector<double> probs;               // per real token
  std::vector<std::uint8_t> actions;       // 1 = keep, 0 = prune
  std::vector<std::uint8_t> protected_tokens;  // forced keep, not sampled
};

struct ActionTrace {
  std::vector<double> shot_probs;
  std::vector<std::uint8_t> shot_actions;  // 1 = keep
  std::vector<TokenDecisions> token_stage;  // entries only for retained shots
  double log_prob = 0.0;

  std::size_t retained_shots() const {
    std::size_t n = 0;
    for (auto a : shot_actions) n += a;
    return n;
  }
};

// One logit per shot from its mean-pooled embedding.
std::vector<double> shot_logits(const PolicyParams& params,
                                const std::vector<std::vector<double>>& pooled);

// One logit per real token of each retained-shot row.
std::vector<double> token_logits(const PolicyParams& params,
                                 std::span<const double> rows_n_by_d,
                                 std::size_t count);

// Sequential two-stage sampling: shot actions first, token actions only over
// retained shots. protected_masks may be empty (no forced-keep positions).
ActionTrace sample_actions(
    const PolicyParams& params, const encoder::EmbeddingBatch& batch,
    const std::vector<std::vector<std::uint8_t>>& protected_masks,
    std::uint64_t seed);

// Greedy variant used at inference: action = (prob >= 0.5), ties keep.
ActionTrace greedy_actions(
    const PolicyParams& params, const encoder::EmbeddingBatch& batch,
    const std::vector<std::vector<std::uint8_t>>& protected_masks);

// Joint log-likelihood of the trace's sampled decisions, recomputed from the
// batch (independent of the value cached in the trace).
double trace_log_prob(const PolicyParams& params,
                      const encoder::EmbeddingBatch& batch,
                      const ActionTrace& trace);

// Exact analytic gradient of trace_log_prob with respect to every parameter.
PolicyGrad log_prob_grad(const PolicyParams& params,
                         const encoder::EmbeddingBatch& batch,
                         const ActionTrace& trace);

// Weights from a scaled zero-mean uniform distribution; output biases chosen
// so the initial retention probability sits near 0.9.
PolicyParams init_params(std::size_t dim, std::size_t hidden, std::uint64_t seed);

// Versioned binary checkpoint: header (dim, hidden, stage count) + float32
// little-endian weight blobs + integrity checksum.
void save_checkpoint(const std::string& path, const PolicyParams& params);
// expected_dim 0 accepts any dimension.
PolicyParams load_checkpoint(const std::string& path, std::size_t expected_dim = 0);

}  // namespace cotprune::policy

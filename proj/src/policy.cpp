#include "cotprune/policy.hpp"

#include <cassert>
#include <cstring>
#include <fstream>

namespace cotprune::policy {

namespace {

constexpr double kKeepBias = 2.1972245773362196;  // sigmoid(b) = 0.9

void check_finite(std::span<const double> xs, const char* what) {
  for (double x : xs)
    if (!std::isfinite(x)) raise(ErrorKind::invalid, std::string(what) + " contains a non-finite value");
}

struct StageGradAccum {
  // Reusable scratch for one backprop pass through a stage.
  std::vector<double> z1;
  std::vector<double> h;
};

// Forward with activations kept for the backward pass.
double stage_forward(const MlpStage& stage, std::span<const double> x,
                     std::size_t dim, std::size_t hidden, StageGradAccum& acc) {
  acc.z1.resize(hidden);
  acc.h.resize(hidden);
  for (std::size_t j = 0; j < hidden; ++j) {
    const double* row = stage.w1.data() + j * dim;
    double z = stage.b1[j];
    for (std::size_t d = 0; d < dim; ++d) z += row[d] * x[d];
    acc.z1[j] = z;
    acc.h[j] = gelu(z);
  }
  double out = stage.b2[0];
  for (std::size_t j = 0; j < hidden; ++j) out += stage.w2[j] * acc.h[j];
  return out;
}

// d(log Bernoulli)/d(logit) = action - prob; chain into stage parameters.
void stage_backward(const MlpStage& stage, MlpStage& grad,
                    std::span<const double> x, std::size_t dim,
                    std::size_t hidden, const StageGradAccum& acc,
                    double dlogit) {
  grad.b2[0] += dlogit;
  for (std::size_t j = 0; j < hidden; ++j) {
    grad.w2[j] += dlogit * acc.h[j];
    const double dz1 = dlogit * stage.w2[j] * gelu_prime(acc.z1[j]);
    grad.b1[j] += dz1;
    double* grow = grad.w1.data() + j * dim;
    for (std::size_t d = 0; d < dim; ++d) grow[d] += dz1 * x[d];
  }
}

MlpStage stage_zeros(std::size_t dim, std::size_t hidden) {
  MlpStage s;
  s.w1.assign(hidden * dim, 0.0);
  s.b1.assign(hidden, 0.0);
  s.w2.assign(hidden, 0.0);
  s.b2.assign(1, 0.0);
  return s;
}

// Walks every sampled decision of a trace in a fixed order, recomputing the
// logit for each one. Shared by trace_log_prob and log_prob_grad.
template <typename Fn>
void walk_decisions(const PolicyParams& params,
                    const encoder::EmbeddingBatch& batch,
                    const ActionTrace& trace, Fn&& fn) {
  if (trace.shot_actions.size() != batch.k)
    raise(ErrorKind::invalid, "trace/batch shot count mismatch");
  StageGradAccum acc;
  for (std::size_t i = 0; i < batch.k; ++i) {
    const auto pooled = encoder::pool_shot(batch, i);
    const double logit =
        stage_forward(params.shot, pooled, params.dim, params.hidden, acc);
    fn(params.shot, pooled, acc, logit, trace.shot_actions[i] != 0, true);
  }
  for (const auto& td : trace.token_stage) {
    if (td.shot >= batch.k)
      raise(ErrorKind::invalid, "trace references a shot outside the batch");
    if (trace.shot_actions[td.shot] == 0)
      raise(ErrorKind::invalid, "trace has token decisions for a pruned shot");
    const std::size_t n = batch.real_tokens(td.shot);
    if (td.actions.size() != n)
      raise(ErrorKind::invalid, "trace/batch token count mismatch");
    for (std::size_t t = 0; t < n; ++t) {
      if (!td.protected_tokens.empty() && td.protected_tokens[t]) continue;
      const auto row = batch.row(td.shot, t);
      const double logit =
          stage_forward(params.token, row, params.dim, params.hidden, acc);
      fn(params.token, row, acc, logit, td.actions[t] != 0, false);
    }
  }
}

}  // namespace

PolicyParams zeros_like(const PolicyParams& p) {
  PolicyParams out;
  out.dim = p.dim;
  out.hidden = p.hidden;
  out.shot = stage_zeros(p.dim, p.hidden);
  out.token = stage_zeros(p.dim, p.hidden);
  return out;
}

std::vector<std::span<double>> param_views(PolicyParams& p) {
  return {p.shot.w1, p.shot.b1, p.shot.w2, p.shot.b2,
          p.token.w1, p.token.b1, p.token.w2, p.token.b2};
}

std::vector<std::span<const double>> param_views(const PolicyParams& p) {
  return {p.shot.w1, p.shot.b1, p.shot.w2, p.shot.b2,
          p.token.w1, p.token.b1, p.token.w2, p.token.b2};
}

std::size_t param_count(const PolicyParams& p) {
  std::size_t n = 0;
  for (auto v : param_views(p)) n += v.size();
  return n;
}

double stage_logit(const MlpStage& stage, std::span<const double> x,
                   std::size_t dim, std::size_t hidden) {
  StageGradAccum acc;
  return stage_forward(stage, x, dim, hidden, acc);
}

std::vector<double> shot_logits(const PolicyParams& params,
                                const std::vector<std::vector<double>>& pooled) {
  std::vector<double> out;
  out.reserve(pooled.size());
  StageGradAccum acc;
  for (const auto& x : pooled) {
    if (x.size() != params.dim)
      raise(ErrorKind::invalid, "pooled vector dimension mismatch");
    check_finite(x, "shot input");
    out.push_back(stage_forward(params.shot, x, params.dim, params.hidden, acc));
  }
  return out;
}

std::vector<double> token_logits(const PolicyParams& params,
                                 std::span<const double> rows_n_by_d,
                                 std::size_t count) {
  check_finite(rows_n_by_d.subspan(0, count * params.dim), "token input");
  std::vector<double> out;
  out.reserve(count);
  StageGradAccum acc;
  for (std::size_t t = 0; t < count; ++t) {
    out.push_back(stage_forward(params.token,
                                rows_n_by_d.subspan(t * params.dim, params.dim),
                                params.dim, params.hidden, acc));
  }
  return out;
}

namespace {

ActionTrace run_two_stage(
    const PolicyParams& params, const encoder::EmbeddingBatch& batch,
    const std::vector<std::vector<std::uint8_t>>& protected_masks,
    Rng* rng /* nullptr = greedy thresholding */) {
  if (batch.k == 0) raise(ErrorKind::invalid, "empty batch");
  if (batch.dim != params.dim)
    raise(ErrorKind::invalid, "batch dimension does not match the policy");
  if (!protected_masks.empty() && protected_masks.size() != batch.k)
    raise(ErrorKind::invalid, "protected mask count does not match the batch");

  ActionTrace trace;
  StageGradAccum acc;
  trace.shot_probs.reserve(batch.k);
  trace.shot_actions.reserve(batch.k);
  for (std::size_t i = 0; i < batch.k; ++i) {
    const auto pooled = encoder::pool_shot(batch, i);
    const double logit =
        stage_forward(params.shot, pooled, params.dim, params.hidden, acc);
    const double p = sigmoid(logit);
    const bool keep = rng ? rng->bernoulli(p) : p >= 0.5;
    trace.shot_probs.push_back(p);
    trace.shot_actions.push_back(keep ? 1 : 0);
    trace.log_prob += bernoulli_log_prob(keep, logit);
  }
  for (std::size_t i = 0; i < batch.k; ++i) {
    if (!trace.shot_actions[i]) continue;
    TokenDecisions td;
    td.shot = i;
    const std::size_t n = batch.real_tokens(i);
    if (!protected_masks.empty()) {
      td.protected_tokens = protected_masks[i];
      if (td.protected_tokens.size() != n)
        raise(ErrorKind::invalid, "protected mask length mismatch for shot " +
                                      std::to_string(i));
    } else {
      td.protected_tokens.assign(n, 0);
    }
    td.probs.reserve(n);
    td.actions.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double logit = stage_forward(params.token, batch.row(i, t),
                                         params.dim, params.hidden, acc);
      const double p = sigmoid(logit);
      td.probs.push_back(p);
      if (td.protected_tokens[t]) {
        td.actions.push_back(1);  // forced keep, no log-prob contribution
        continue;
      }
      const bool keep = rng ? rng->bernoulli(p) : p >= 0.5;
      td.actions.push_back(keep ? 1 : 0);
      trace.log_prob += bernoulli_log_prob(keep, logit);
    }
    trace.token_stage.push_back(std::move(td));
  }
  return trace;
}

}  // namespace

ActionTrace sample_actions(
    const PolicyParams& params, const encoder::EmbeddingBatch& batch,
    const std::vector<std::vector<std::uint8_t>>& protected_masks,
    std::uint64_t seed) {
  Rng rng(seed);
  return run_two_stage(params, batch, protected_masks, &rng);
}

ActionTrace greedy_actions(
    const PolicyParams& params, const encoder::EmbeddingBatch& batch,
    const std::vector<std::vector<std::uint8_t>>& protected_masks) {
  return run_two_stage(params, batch, protected_masks, nullptr);
}

double trace_log_prob(const PolicyParams& params,
                      const encoder::EmbeddingBatch& batch,
                      const ActionTrace& trace) {
  double lp = 0.0;
  walk_decisions(params, batch, trace,
                 [&](const MlpStage&, std::span<const double>,
                     const StageGradAccum&, double logit, bool action, bool) {
                   lp += bernoulli_log_prob(action, logit);
                 });
  return lp;
}

PolicyGrad log_prob_grad(const PolicyParams& params,
                         const encoder::EmbeddingBatch& batch,
                         const ActionTrace& trace) {
  PolicyGrad grad = zeros_like(params);
  walk_decisions(params, batch, trace,
                 [&](const MlpStage& stage, std::span<const double> x,
                     const StageGradAccum& acc, double logit, bool action,
                     bool is_shot_stage) {
                   const double dlogit = (action ? 1.0 : 0.0) - sigmoid(logit);
                   stage_backward(stage, is_shot_stage ? grad.shot : grad.token,
                                  x, params.dim, params.hidden, acc, dlogit);
                 });
  return grad;
}

PolicyParams init_params(std::size_t dim, std::size_t hidden, std::uint64_t seed) {
  if (dim == 0 || hidden == 0)
    raise(ErrorKind::invalid, "policy dimensions must be >= 1");
  PolicyParams p;
  p.dim = dim;
  p.hidden = hidden;
  Rng rng(derive_seed(seed, "policy-init"));
  auto fill_stage = [&](MlpStage& s) {
    s = stage_zeros(dim, hidden);
    const double r1 = 1.0 / std::sqrt(static_cast<double>(dim));
    const double r2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& w : s.w1) w = rng.uniform(-r1, r1);
    for (double& w : s.w2) w = rng.uniform(-r2, r2);
    s.b2[0] = kKeepBias;
  };
  fill_stage(p.shot);
  fill_stage(p.token);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}
void put_f32(std::string& buf, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}
float get_f32(const std::string& buf, std::size_t& pos) {
  std::uint32_t v = get_u32(buf, pos);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void save_checkpoint(const std::string& path, const PolicyParams& params) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(params.dim));
  put_u32(buf, static_cast<std::uint32_t>(params.hidden));
  put_u32(buf, 2);  // stage count
  for (auto view : param_views(const_cast<PolicyParams&>(params)))
    for (double w : view) put_f32(buf, static_cast<float>(w));
  const std::uint64_t checksum = fnv1a64(buf);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((checksum >> (8 * i)) & 0xff));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) raise(ErrorKind::io, "checkpoint write failed: " + path);
}

PolicyParams load_checkpoint(const std::string& path, std::size_t expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::io, "cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 * 4 + 8 || std::memcmp(buf.data(), kMagic, 4) != 0)
    raise(ErrorKind::parse, "not a checkpoint file: " + path);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(buf[buf.size() - 8 + i]))
              << (8 * i);
  std::string payload = buf.substr(0, buf.size() - 8);
  if (fnv1a64(payload) != stored)
    raise(ErrorKind::parse, "checkpoint checksum mismatch: " + path);

  std::size_t pos = 4;
  const std::uint32_t version = get_u32(payload, pos);
  if (version != kVersion)
    raise(ErrorKind::parse, "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t dim = get_u32(payload, pos);
  const std::uint32_t hidden = get_u32(payload, pos);
  const std::uint32_t stages = get_u32(payload, pos);
  if (stages != 2)
    raise(ErrorKind::parse, "unexpected stage count " + std::to_string(stages));
  if (expected_dim != 0 && dim != expected_dim)
    raise(ErrorKind::invalid,
          "checkpoint dimension " + std::to_string(dim) +
              " does not match encoder dimension " + std::to_string(expected_dim));

  PolicyParams p;
  p.dim = dim;
  p.hidden = hidden;
  p.shot = stage_zeros(dim, hidden);
  p.token = stage_zeros(dim, hidden);
  const std::size_t want = param_count(p);
  if (payload.size() - pos != want * 4)
    raise(ErrorKind::parse, "checkpoint payload size mismatch");
  for (auto view : param_views(p))
    for (double& w : view) w = static_cast<double>(get_f32(payload, pos));
  return p;
}

}  // namespace cotprune::policy

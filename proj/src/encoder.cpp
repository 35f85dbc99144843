#include "cotprune/encoder.hpp"

#include <cassert>
#include <cmath>
#include <cstring>

#include <httplib.h>
#include <json.hpp>

namespace cotprune::encoder {

namespace {
constexpr std::size_t kPieceWidth = 4;  // BERT-ish greedy subword chunking
}

TokenizedExample tokenize(std::string_view text, std::size_t pad_to) {
  if (pad_to == 0) raise(ErrorKind::invalid, "pad_to must be >= 1");
  if (trim(text).empty())
    raise(ErrorKind::invalid, "cannot tokenize empty input");

  TokenizedExample out;
  out.pad_to = pad_to;
  out.pad_mask.assign(pad_to, 0);

  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= n) break;
    if (out.tokens.size() >= pad_to) {
      out.truncated = true;
      break;
    }
    std::size_t start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t word_index = out.word_spans.size();
    out.word_spans.emplace_back(start, i);
    for (std::size_t p = start; p < i && !out.truncated; p += kPieceWidth) {
      if (out.tokens.size() >= pad_to) {
        out.truncated = true;  // word continues past the token budget
        break;
      }
      std::size_t end = std::min(i, p + kPieceWidth);
      std::string piece(p == start ? "" : "##");
      piece.append(text.substr(p, end - p));
      out.tokens.push_back(std::move(piece));
      out.token_spans.emplace_back(p, end);
      out.token_word.push_back(word_index);
    }
    if (out.truncated) break;
  }
  // Words cut off by truncation keep no tokens; the span list stays aligned
  // with the tokens that do exist.
  for (std::size_t t = 0; t < out.tokens.size(); ++t) out.pad_mask[t] = 1;
  return out;
}

MockEncoder::MockEncoder(std::size_t dim, std::uint64_t seed, double ramp_scale)
    : dim_(dim), seed_(seed), ramp_scale_(ramp_scale) {
  if (dim_ == 0) raise(ErrorKind::invalid, "encoder dim must be >= 1");
}

void MockEncoder::embed(const TokenizedExample& ex, std::span<double> out) const {
  assert(out.size() >= ex.tokens.size() * dim_);
  for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
    double* row = out.data() + t * dim_;
    Rng rng(derive_seed(seed_, fnv1a64(ex.tokens[t])));
    double norm2 = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) {
      row[d] = rng.uniform(-1.0, 1.0);
      norm2 += row[d] * row[d];
    }
    const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-12));
    const double ramp =
        ramp_scale_ * static_cast<double>(t) / static_cast<double>(ex.pad_to);
    for (std::size_t d = 0; d < dim_; ++d) row[d] = row[d] * inv + ramp;
  }
}

std::uint64_t MockEncoder::state_hash() const {
  std::uint64_t h = fnv1a64("mock-encoder-v1");
  h = fnv1a64_mix(h, dim_);
  h = fnv1a64_mix(h, seed_);
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(ramp_scale_ * 1e9));
  return h;
}

// ---------------------------------------------------------------------------
// Remote encoder client
// ---------------------------------------------------------------------------

struct RemoteEncoder::Impl {
  Options opts;
  std::string host;
  int port = 80;
  mutable std::size_t discovered_dim = 0;
};

namespace {
void split_base_url(const std::string& url, std::string& host, int& port) {
  std::string rest = url;
  auto scheme = rest.find("://");
  if (scheme != std::string::npos) rest = rest.substr(scheme + 3);
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  auto colon = rest.rfind(':');
  if (colon == std::string::npos) {
    host = rest;
    port = 80;
  } else {
    host = rest.substr(0, colon);
    port = std::stoi(rest.substr(colon + 1));
  }
}
}  // namespace

RemoteEncoder::RemoteEncoder(Options opts) : impl_(std::make_unique<Impl>()) {
  if (opts.base_url.empty())
    raise(ErrorKind::config, "remote encoder requires a base URL");
  impl_->opts = std::move(opts);
  split_base_url(impl_->opts.base_url, impl_->host, impl_->port);
}

RemoteEncoder::~RemoteEncoder() = default;

std::size_t RemoteEncoder::dim() const {
  if (impl_->discovered_dim == 0)
    raise(ErrorKind::invalid,
          "remote encoder dimension unknown before the first embed call");
  return impl_->discovered_dim;
}

void RemoteEncoder::embed(const TokenizedExample& ex, std::span<double> out) const {
  nlohmann::json req{{"tokens", ex.tokens}};
  httplib::Client cli(impl_->host, impl_->port);
  cli.set_connection_timeout(impl_->opts.timeout_ms / 1000,
                             (impl_->opts.timeout_ms % 1000) * 1000);
  cli.set_read_timeout(impl_->opts.timeout_ms / 1000,
                       (impl_->opts.timeout_ms % 1000) * 1000);
  httplib::Headers headers;
  if (!impl_->opts.auth_token.empty())
    headers.emplace("Authorization", "Bearer " + impl_->opts.auth_token);

  httplib::Result res;
  for (int attempt = 0; attempt <= impl_->opts.retries; ++attempt) {
    res = cli.Post("/v1/embed", headers, req.dump(), "application/json");
    if (res) break;
  }
  if (!res)
    raise(ErrorKind::transport,
          "embedding service unreachable at " + impl_->opts.base_url);
  if (res->status != 200)
    raise(ErrorKind::transport, "embedding service returned HTTP " +
                                    std::to_string(res->status));
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::malformed, std::string("embedding response is not JSON: ") + e.what());
  }
  if (!body.contains("dim") || !body.contains("vectors"))
    raise(ErrorKind::malformed, "embedding response missing dim/vectors");
  const std::size_t d = body.at("dim").get<std::size_t>();
  if (impl_->discovered_dim == 0)
    impl_->discovered_dim = d;
  else if (impl_->discovered_dim != d)
    raise(ErrorKind::malformed,
          "embedding dimension changed mid-session: " +
              std::to_string(impl_->discovered_dim) + " -> " + std::to_string(d));
  const auto& vectors = body.at("vectors");
  if (vectors.size() != ex.tokens.size())
    raise(ErrorKind::malformed, "embedding response row count mismatch");
  for (std::size_t t = 0; t < vectors.size(); ++t) {
    const auto& v = vectors[t];
    if (v.size() != d)
      raise(ErrorKind::malformed, "embedding vector has wrong dimension");
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] = v[j].get<double>();
  }
}

std::uint64_t RemoteEncoder::state_hash() const {
  // A remote service is assumed frozen; identity is its endpoint.
  return fnv1a64(impl_->opts.base_url, fnv1a64("remote-encoder-v1"));
}

// ---------------------------------------------------------------------------

EmbeddingBatch embed_batch(const std::vector<TokenizedExample>& examples,
                           const EncoderBackend& backend) {
  if (examples.empty())
    raise(ErrorKind::invalid, "embed_batch requires at least one example");
  EmbeddingBatch batch;
  batch.k = examples.size();
  batch.pad = examples.front().pad_to;
  for (const auto& ex : examples)
    if (ex.pad_to != batch.pad)
      raise(ErrorKind::invalid, "mixed pad lengths in one batch");
  batch.dim = backend.dim();
  batch.hidden.assign(batch.k * batch.pad * batch.dim, 0.0);
  batch.pad_masks.reserve(batch.k);
  std::vector<double> rows;
  for (std::size_t i = 0; i < batch.k; ++i) {
    const auto& ex = examples[i];
    rows.assign(ex.real_tokens() * batch.dim, 0.0);
    backend.embed(ex, rows);
    if (batch.dim != backend.dim())
      raise(ErrorKind::invalid, "encoder dimension changed during a batch");
    std::memcpy(batch.hidden.data() + i * batch.pad * batch.dim, rows.data(),
                rows.size() * sizeof(double));
    batch.pad_masks.push_back(ex.pad_mask);
  }
#ifndef NDEBUG
  for (double v : batch.hidden) assert(std::isfinite(v));
#endif
  return batch;
}

std::vector<double> pool_shot(std::span<const double> row_major_n_by_d,
                              std::span<const std::uint8_t> pad_mask,
                              std::size_t dim) {
  std::vector<double> mean(dim, 0.0);
  std::size_t count = 0;
  for (std::size_t pos = 0; pos < pad_mask.size(); ++pos) {
    if (!pad_mask[pos]) continue;
    const double* row = row_major_n_by_d.data() + pos * dim;
    for (std::size_t d = 0; d < dim; ++d) mean[d] += row[d];
    ++count;
  }
  if (count == 0)
    raise(ErrorKind::invalid, "pool_shot requires at least one real token");
  for (double& v : mean) v /= static_cast<double>(count);
  return mean;
}

std::vector<double> pool_shot(const EmbeddingBatch& batch, std::size_t shot) {
  return pool_shot({batch.hidden.data() + shot * batch.pad * batch.dim,
                    batch.pad * batch.dim},
                   batch.pad_masks[shot], batch.dim);
}

std::vector<std::uint8_t> protected_token_mask(
    std::string_view text, const TokenizedExample& tok,
    std::span<const std::string_view> phrases) {
  std::vector<std::pair<std::size_t, std::size_t>> regions;
  for (auto phrase : phrases) {
    std::size_t from = 0;
    while (true) {
      auto pos = text.find(phrase, from);
      if (pos == std::string_view::npos) break;
      regions.emplace_back(pos, pos + phrase.size());
      from = pos + 1;
    }
  }
  std::vector<std::uint8_t> mask(tok.tokens.size(), 0);
  for (std::size_t t = 0; t < tok.tokens.size(); ++t) {
    const auto [b, e] = tok.token_spans[t];
    for (const auto& [rb, re] : regions) {
      if (b < re && rb < e) {
        mask[t] = 1;
        break;
      }
    }
  }
  return mask;
}

}  // namespace cotprune::encoder

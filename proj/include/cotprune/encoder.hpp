#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cotprune/common.hpp"

namespace cotprune::encoder {

inline constexpr std::size_t kDefaultPad = 512;

// Subword tokenization of one example, with the char-span bookkeeping the
// word-level pruner needs.
struct TokenizedExample {
  std::vector<std::string> tokens;  // subword pieces, <= pad_to
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;   // [start,end) per word
  std::vector<std::pair<std::size_t, std::size_t>> token_spans;  // [start,end) per token
  std::vector<std::size_t> token_word;  // parent word index per token
  std::vector<std::uint8_t> pad_mask;   // length pad_to; 1 = real token (leading)
  std::size_t pad_to = kDefaultPad;
  bool truncated = false;

  std::size_t real_tokens() const { return tokens.size(); }
};

// Greedy fixed-width subword split with BERT-style "##" continuation pieces.
// Throws Error{invalid} on input that is empty after trimming.
TokenizedExample tokenize(std::string_view text, std::size_t pad_to = kDefaultPad);

class EncoderBackend {
public:
  virtual ~EncoderBackend() = default;
  virtual std::size_t dim() const = 0;
  // Writes real-token rows into out (row-major, real_tokens x dim).
  virtual void embed(const TokenizedExample& ex, std::span<double> out) const = 0;
  // Content hash of the backend's frozen state.
  virtual std::uint64_t state_hash() const = 0;
};

// Deterministic stand-in encoder: each token maps to a fixed pseudo-random
// unit vector keyed by the token string's FNV hash, plus a small positional
// ramp. Pure function of the token sequence, stable across runs and machines.
class MockEncoder final : public EncoderBackend {
public:
  explicit MockEncoder(std::size_t dim = 64, std::uint64_t seed = 0x5eed,
                       double ramp_scale = 0.01);
  std::size_t dim() const override { return dim_; }
  void embed(const TokenizedExample& ex, std::span<double> out) const override;
  std::uint64_t state_hash() const override;

private:
  std::size_t dim_;
  std::uint64_t seed_;
  double ramp_scale_;
};

// Client for an external embedding service; D is discovered at the first call
// and validated thereafter. See README for the wire contract.
class RemoteEncoder final : public EncoderBackend {
public:
  struct Options {
    std::string base_url;      // e.g. http://127.0.0.1:8089
    int timeout_ms = 30000;
    int retries = 2;
    std::string auth_token;    // optional bearer token
  };
  explicit RemoteEncoder(Options opts);
  ~RemoteEncoder() override;
  std::size_t dim() const override;
  void embed(const TokenizedExample& ex, std::span<double> out) const override;
  std::uint64_t state_hash() const override;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Per-token hidden states for a batch of k examples, shape (k, pad, dim),
// padded positions zero.
struct EmbeddingBatch {
  std::size_t k = 0;
  std::size_t pad = kDefaultPad;
  std::size_t dim = 0;
  std::vector<double> hidden;               // k * pad * dim
  std::vector<std::vector<std::uint8_t>> pad_masks;  // k masks of length pad

  std::span<const double> row(std::size_t shot, std::size_t pos) const {
    return {hidden.data() + (shot * pad + pos) * dim, dim};
  }
  std::size_t real_tokens(std::size_t shot) const {
    std::size_t n = 0;
    for (auto m : pad_masks[shot]) n += m;
    return n;
  }
};

EmbeddingBatch embed_batch(const std::vector<TokenizedExample>& examples,
                           const EncoderBackend& backend);

// Mean of hidden vectors over real-token positions. Throws on an all-pad row.
std::vector<double> pool_shot(std::span<const double> row_major_n_by_d,
                              std::span<const std::uint8_t> pad_mask,
                              std::size_t dim);

std::vector<double> pool_shot(const EmbeddingBatch& batch, std::size_t shot);

// Marks tokens whose char span overlaps an occurrence of any protected phrase.
std::vector<std::uint8_t> protected_token_mask(
    std::string_view text, const TokenizedExample& tok,
    std::span<const std::string_view> phrases);

}  // namespace cotprune::encoder

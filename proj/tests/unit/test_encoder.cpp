#include <doctest.h>

#include <cmath>

#include "cotprune/corpus.hpp"
#include "cotprune/encoder.hpp"
#include "support/testutil.hpp"

using namespace cotprune;
using encoder::MockEncoder;
using encoder::TokenizedExample;

TEST_CASE("tokenize reconstructs the source through word spans") {
  const std::string text = "The answer is 16.";
  const auto tok = encoder::tokenize(text);
  REQUIRE(tok.word_spans.size() == 4);
  std::string rebuilt;
  for (const auto& [b, e] : tok.word_spans) {
    if (!rebuilt.empty()) rebuilt += " ";
    rebuilt += text.substr(b, e - b);
  }
  CHECK(rebuilt == text);
  CHECK_FALSE(tok.truncated);
  for (std::size_t t = 0; t < tok.tokens.size(); ++t)
    CHECK(tok.pad_mask[t] == 1);
  for (std::size_t t = tok.tokens.size(); t < tok.pad_to; ++t)
    CHECK(tok.pad_mask[t] == 0);
}

TEST_CASE("long input truncates at the padding length") {
  std::string text;
  for (int i = 0; i < 600; ++i) text += "verylongword" + std::to_string(i) + " ";
  const auto tok = encoder::tokenize(text, 512);
  CHECK(tok.tokens.size() == 512);
  CHECK(tok.truncated);
}

TEST_CASE("single word covers the whole string with one span") {
  const auto tok = encoder::tokenize("tickets");
  REQUIRE(tok.word_spans.size() == 1);
  CHECK(tok.word_spans[0].first == 0);
  CHECK(tok.word_spans[0].second == 7);
  for (auto w : tok.token_word) CHECK(w == 0);
}

TEST_CASE("word spans are ascending and cover all non-whitespace characters") {
  const std::string text = "Q: Dave  won 11\nA: totals 16. The answer is 16.\n";
  const auto tok = encoder::tokenize(text);
  std::size_t prev_end = 0;
  std::vector<bool> covered(text.size(), false);
  for (const auto& [b, e] : tok.word_spans) {
    CHECK(b >= prev_end);
    prev_end = e;
    for (std::size_t i = b; i < e; ++i) covered[i] = true;
  }
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!std::isspace(static_cast<unsigned char>(text[i]))) CHECK(covered[i]);
  }
}

TEST_CASE("tokenize rejects empty input") {
  CHECK_THROWS_AS(encoder::tokenize(""), Error);
  CHECK_THROWS_AS(encoder::tokenize("   \n "), Error);
}

TEST_CASE("embed_batch is deterministic and shaped (k, pad, dim)") {
  MockEncoder enc(32);
  const auto tok = encoder::tokenize("Count 3 apples and 4 pears.");
  const auto batch = encoder::embed_batch({tok, tok, tok}, enc);
  CHECK(batch.k == 3);
  CHECK(batch.pad == 512);
  CHECK(batch.dim == 32);
  CHECK(batch.hidden.size() == 3 * 512 * 32);
  // Identical examples embed to identical rows.
  for (std::size_t pos = 0; pos < tok.tokens.size(); ++pos)
    for (std::size_t d = 0; d < 32; ++d)
      CHECK(batch.row(0, pos)[d] == batch.row(1, pos)[d]);
  // Padded tail is all zeros.
  for (std::size_t pos = tok.tokens.size(); pos < 512; ++pos)
    for (std::size_t d = 0; d < 32; ++d) CHECK(batch.row(2, pos)[d] == 0.0);
}

TEST_CASE("mock embedding is a pure function of the token sequence") {
  MockEncoder enc(16);
  // Same words, different surrounding whitespace: token sequences match.
  const auto a = encoder::tokenize("alpha beta  gamma");
  const auto b = encoder::tokenize("alpha beta gamma");
  REQUIRE(a.tokens == b.tokens);
  std::vector<double> ra(a.tokens.size() * 16), rb(b.tokens.size() * 16);
  enc.embed(a, ra);
  enc.embed(b, rb);
  CHECK(ra == rb);
}

TEST_CASE("pool_shot averages real-token rows") {
  const std::size_t dim = 8;
  SUBCASE("constant rows pool to the constant") {
    std::vector<double> rows(5 * dim);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t d = 0; d < dim; ++d) rows[t * dim + d] = 1.5;
    std::vector<std::uint8_t> mask(5, 1);
    const auto mean = encoder::pool_shot(rows, mask, dim);
    for (double v : mean) CHECK(v == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("opposite rows cancel") {
    std::vector<double> rows(2 * dim);
    for (std::size_t d = 0; d < dim; ++d) {
      rows[d] = 0.7;
      rows[dim + d] = -0.7;
    }
    std::vector<std::uint8_t> mask(2, 1);
    const auto mean = encoder::pool_shot(rows, mask, dim);
    for (double v : mean) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("random rows match a naive summation loop to 1e-12") {
    Rng rng(11);
    const std::size_t n = 64;
    std::vector<double> rows(n * dim);
    std::vector<std::uint8_t> mask(n, 0);
    for (std::size_t t = 0; t < n; ++t) {
      mask[t] = rng.bernoulli(0.6) ? 1 : 0;
      for (std::size_t d = 0; d < dim; ++d)
        rows[t * dim + d] = rng.uniform(-2.0, 2.0);
    }
    mask[0] = 1;  // at least one real token
    const auto mean = encoder::pool_shot(rows, mask, dim);
    for (std::size_t d = 0; d < dim; ++d) {
      double sum = 0.0;
      int count = 0;
      for (std::size_t t = 0; t < n; ++t)
        if (mask[t]) {
          sum += rows[t * dim + d];
          ++count;
        }
      CHECK(mean[d] == doctest::Approx(sum / count).epsilon(1e-12));
    }
  }
  SUBCASE("all-pad row is an error") {
    std::vector<double> rows(3 * dim, 0.0);
    std::vector<std::uint8_t> mask(3, 0);
    CHECK_THROWS_AS(encoder::pool_shot(rows, mask, dim), Error);
  }
}

TEST_CASE("pool_shot is permutation-invariant over real tokens") {
  const std::size_t dim = 4, n = 10;
  Rng rng(5);
  std::vector<double> rows(n * dim);
  for (auto& v : rows) v = rng.uniform(-1.0, 1.0);
  std::vector<std::uint8_t> mask(n, 1);
  const auto base = encoder::pool_shot(rows, mask, dim);
  // Swap two rows.
  for (std::size_t d = 0; d < dim; ++d)
    std::swap(rows[2 * dim + d], rows[7 * dim + d]);
  const auto swapped = encoder::pool_shot(rows, mask, dim);
  for (std::size_t d = 0; d < dim; ++d)
    CHECK(base[d] == doctest::Approx(swapped[d]).epsilon(1e-12));
}

TEST_CASE("protected mask covers structural markers only") {
  const std::string text =
      "Q: Dave won 11 tickets\nA: Let's think step by step. The answer is 16.\n";
  const auto tok = encoder::tokenize(text);
  const auto mask = encoder::protected_token_mask(
      text, tok, std::span<const std::string_view>(corpus::kStructuralMarkers));
  REQUIRE(mask.size() == tok.tokens.size());
  auto word_of = [&](std::size_t t) {
    const auto [b, e] = tok.word_spans[tok.token_word[t]];
    return text.substr(b, e - b);
  };
  int protected_count = 0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    const auto w = word_of(t);
    if (w == "Q:" || w == "A:" || w == "Let's" || w == "think" || w == "step" ||
        w == "by" || w == "step." || w == "The" || w == "answer" || w == "is") {
      // Tokens belonging to marker phrases must be protected...
      if (mask[t]) ++protected_count;
    } else {
      // ...and nothing else may be.
      CHECK(mask[t] == 0);
    }
  }
  CHECK(protected_count > 0);
  // "Dave", "won", "11", "tickets", "16." stay unprotected.
  for (std::size_t t = 0; t < mask.size(); ++t) {
    const auto w = word_of(t);
    if (w == "Dave" || w == "won" || w == "11" || w == "tickets" || w == "16.")
      CHECK(mask[t] == 0);
  }
}

TEST_CASE("dimension mismatch across a batch is rejected") {
  MockEncoder enc(8);
  auto a = encoder::tokenize("one two", 64);
  auto b = encoder::tokenize("three four", 128);
  CHECK_THROWS_AS(encoder::embed_batch({a, b}, enc), Error);
}

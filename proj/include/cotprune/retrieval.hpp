#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cotprune/corpus.hpp"
#include "cotprune/encoder.hpp"

namespace cotprune::retrieval {

struct IndexEntry {
  std::string id;
  std::vector<double> embedding;           // pooled, dimension = index dim
  std::map<std::string, int> term_freq;    // lowercased alnum terms
  std::size_t length = 0;                  // term count of the document
};

struct RetrievalIndex {
  std::vector<IndexEntry> entries;              // corpus order
  std::map<std::string, int> doc_freq;          // term -> #docs containing it
  double avg_doc_len = 0.0;
  std::size_t dim = 0;
  std::uint64_t corpus_fingerprint = 0;
};

// Lowercased terms split on any non-alphanumeric character.
std::vector<std::string> split_terms(std::string_view text);

// One entry per candidate: pooled sentence embedding of the rendered example
// plus term statistics.
RetrievalIndex build_index(const std::vector<corpus::CotExample>& candidates,
                           const encoder::EncoderBackend& embedder);

// Pooled embedding for a target question, rendered as "Q: {question}\nA:".
std::vector<double> query_embedding(const std::string& question,
                                    const encoder::EncoderBackend& embedder);

// Top-k by cosine similarity, descending; ties broken by ascending corpus
// index. k > pool size returns the whole pool. Zero-norm query is an error.
std::vector<std::string> retrieve_topk(const RetrievalIndex& index,
                                       std::span<const double> query,
                                       std::size_t k);

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;
};

// Okapi BM25 with the usual nonnegative idf: ln(1 + (N - df + 0.5)/(df + 0.5)).
std::vector<std::string> retrieve_bm25(const RetrievalIndex& index,
                                       std::string_view query_text,
                                       std::size_t k, Bm25Params params = {});

// k ids sampled uniformly without replacement; reproducible for a fixed seed.
std::vector<std::string> retrieve_random(const RetrievalIndex& index,
                                         std::size_t k, std::uint64_t seed);

// Index cache with a format-version header; load returns nullopt when the
// file is absent, corrupt, or built from a different corpus.
void save_index(const std::string& path, const RetrievalIndex& index);
std::optional<RetrievalIndex> load_index(const std::string& path,
                                         std::uint64_t corpus_fingerprint);

}  // namespace cotprune::retrieval

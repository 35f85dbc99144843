#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cotprune/corpus.hpp"
#include "cotprune/encoder.hpp"
#include "cotprune/oracle.hpp"
#include "cotprune/policy.hpp"

namespace cotprune::assembly {

// k retrieved examples with their tokenizations and embeddings, in retrieval
// order (rank 0 first).
struct ShotBatch {
  std::vector<corpus::CotExample> examples;
  std::vector<std::string> rendered;
  std::vector<encoder::TokenizedExample> tokenized;
  encoder::EmbeddingBatch embeddings;
  std::vector<std::vector<std::uint8_t>> protected_masks;  // empty: no protection
};

ShotBatch build_shot_batch(const std::vector<corpus::CotExample>& shots,
                           const encoder::EncoderBackend& enc,
                           bool protect_markers,
                           std::size_t pad = encoder::kDefaultPad);

// Word-granularity deletion over one text: a word dies only when every one of
// its subword tokens was marked prune. Whitespace collapses to single spaces;
// newline structure between surviving words is preserved.
std::string prune_words(std::string_view text,
                        const encoder::TokenizedExample& tok,
                        std::span<const std::uint8_t> token_actions);

// Pruned text for each retained shot, in batch order. All-keep traces
// reproduce the rendered text exactly.
std::vector<std::string> apply_pruning(const ShotBatch& shots,
                                       const policy::ActionTrace& trace);

// Rule-based structural repair: restores lost "Q: "/"A: " markers, repairs
// "Let's step by step", and re-inserts missing blank lines between examples.
// Idempotent.
std::string reconstruct(const std::string& text);

struct PrunedPrompt {
  std::vector<std::string> retained_ids;    // final, in retrieval order
  std::vector<std::string> retained_texts;  // aligned with retained_ids
  std::string anchor;
  std::string question_block;
  std::string full_text;
  int token_count = 0;        // final count, <= limit after enforcement
  int raw_tokens = 0;         // all shots unpruned + anchor + question
  int after_shot_tokens = 0;  // retained shots unpruned + anchor + question
  int after_token_tokens = 0; // after word pruning, before budget drops
  int anchor_tokens = 0;
  int dropped_for_budget = 0;
};

// Drops the lowest-retrieval-rank retained shot until the prompt fits.
// Throws Error{budget} when anchor + question alone exceed the limit.
void enforce_budget(PrunedPrompt& prompt, int token_limit,
                    const oracle::OracleBackend& counter);

// apply_pruning -> reconstruct -> concatenate -> enforce_budget.
PrunedPrompt assemble(const ShotBatch& shots, const policy::ActionTrace& trace,
                      const std::string& anchor, const std::string& question,
                      int token_limit, const oracle::OracleBackend& counter);

std::string question_block(const std::string& question);

}  // namespace cotprune::assembly

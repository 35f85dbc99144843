#include "cotprune/assembly.hpp"

#include <algorithm>
#include <cassert>

namespace cotprune::assembly {

ShotBatch build_shot_batch(const std::vector<corpus::CotExample>& shots,
                           const encoder::EncoderBackend& enc,
                           bool protect_markers, std::size_t pad) {
  if (shots.empty()) raise(ErrorKind::invalid, "shot batch must be non-empty");
  ShotBatch batch;
  batch.examples = shots;
  batch.rendered.reserve(shots.size());
  batch.tokenized.reserve(shots.size());
  for (const auto& ex : shots) {
    batch.rendered.push_back(corpus::render(ex));
    batch.tokenized.push_back(encoder::tokenize(batch.rendered.back(), pad));
  }
  batch.embeddings = encoder::embed_batch(batch.tokenized, enc);
  if (protect_markers) {
    batch.protected_masks.reserve(shots.size());
    for (std::size_t i = 0; i < shots.size(); ++i) {
      batch.protected_masks.push_back(encoder::protected_token_mask(
          batch.rendered[i], batch.tokenized[i],
          std::span<const std::string_view>(corpus::kStructuralMarkers)));
    }
  }
  return batch;
}

std::string prune_words(std::string_view text,
                        const encoder::TokenizedExample& tok,
                        std::span<const std::uint8_t> token_actions) {
  if (token_actions.size() != tok.tokens.size())
    raise(ErrorKind::invalid, "action count does not match token count");
  const std::size_t n_words = tok.word_spans.size();
  std::vector<std::uint8_t> has_tokens(n_words, 0);
  std::vector<std::uint8_t> any_kept(n_words, 0);
  for (std::size_t t = 0; t < tok.tokens.size(); ++t) {
    const std::size_t w = tok.token_word[t];
    has_tokens[w] = 1;
    if (token_actions[t]) any_kept[w] = 1;
  }

  std::string out;
  out.reserve(text.size());
  std::size_t prev_end = std::string_view::npos;
  for (std::size_t w = 0; w < n_words; ++w) {
    // Words past the tokenizer's truncation point carry no decisions; keep.
    if (has_tokens[w] && !any_kept[w]) continue;
    const auto [b, e] = tok.word_spans[w];
    if (prev_end != std::string_view::npos) {
      std::size_t newlines = 0;
      for (std::size_t i = prev_end; i < b; ++i)
        if (text[i] == '\n') ++newlines;
      if (newlines > 0)
        out.append(newlines, '\n');
      else
        out.push_back(' ');
    }
    out.append(text.substr(b, e - b));
    prev_end = e;
  }
  if (prev_end != std::string_view::npos) {
    std::size_t newlines = 0;
    for (std::size_t i = prev_end; i < text.size(); ++i)
      if (text[i] == '\n') ++newlines;
    out.append(newlines, '\n');
  }
  return out;
}

std::vector<std::string> apply_pruning(const ShotBatch& shots,
                                       const policy::ActionTrace& trace) {
  if (trace.shot_actions.size() != shots.examples.size())
    raise(ErrorKind::invalid, "trace does not match the shot batch");
  std::vector<std::string> out;
  out.reserve(trace.token_stage.size());
  for (const auto& td : trace.token_stage) {
    if (td.shot >= shots.examples.size())
      raise(ErrorKind::invalid, "trace references a shot outside the batch");
    const auto& tok = shots.tokenized[td.shot];
    if (td.actions.size() != tok.tokens.size())
      raise(ErrorKind::invalid, "trace token count mismatch for shot " +
                                    std::to_string(td.shot));
    out.push_back(prune_words(shots.rendered[td.shot], tok, td.actions));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

namespace {

void replace_all(std::string& text, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
}

enum class LineKind { blank, question, answer };

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

std::string reconstruct(const std::string& text) {
  std::string work = text;
  replace_all(work, "Let's step by step", "Let's think step by step");

  const bool trailing_newline = !work.empty() && work.back() == '\n';
  std::vector<std::string> lines;
  {
    std::size_t start = 0;
    while (start <= work.size()) {
      auto nl = work.find('\n', start);
      if (nl == std::string::npos) {
        lines.push_back(work.substr(start));
        break;
      }
      lines.push_back(work.substr(start, nl - start));
      start = nl + 1;
    }
    if (trailing_newline && !lines.empty() && lines.back().empty())
      lines.pop_back();
  }

  // Label every line, restoring lost markers by position and content.
  std::vector<LineKind> kinds(lines.size(), LineKind::blank);
  LineKind prev = LineKind::blank;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string& line = lines[i];
    if (trim(line).empty()) {
      kinds[i] = LineKind::blank;
    } else if (starts_with(line, "Q:")) {
      kinds[i] = LineKind::question;
    } else if (starts_with(line, "A:")) {
      kinds[i] = LineKind::answer;
    } else if (starts_with(line, "Let's think step by step") ||
               contains(line, corpus::kAnswerMarker)) {
      line.insert(0, "A: ");
      kinds[i] = LineKind::answer;
    } else if (prev == LineKind::question) {
      line.insert(0, "A: ");
      kinds[i] = LineKind::answer;
    } else {
      line.insert(0, "Q: ");
      kinds[i] = LineKind::question;
    }
    prev = kinds[i];
  }

  // A question line opens a new example; separate it from preceding content.
  std::vector<std::string> out_lines;
  out_lines.reserve(lines.size() + 4);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (kinds[i] == LineKind::question && !out_lines.empty() &&
        !trim(out_lines.back()).empty())
      out_lines.emplace_back();
    out_lines.push_back(std::move(lines[i]));
  }

  std::string result;
  for (std::size_t i = 0; i < out_lines.size(); ++i) {
    result += out_lines[i];
    if (i + 1 < out_lines.size()) result += '\n';
  }
  if (trailing_newline) result += '\n';
  return result;
}

// ---------------------------------------------------------------------------
// Assembly and budget enforcement
// ---------------------------------------------------------------------------

std::string question_block(const std::string& question) {
  return "Q: " + question + "\nA: Let's think step by step.";
}

namespace {

// Shot texts end with '\n'; a single extra separator line sits between
// blocks and before the anchor.
std::string compose(const std::vector<std::string>& shot_texts,
                    const std::string& anchor, const std::string& qblock) {
  std::string full;
  for (const auto& text : shot_texts) {
    full += text;
    full += '\n';
  }
  full += anchor;
  full += "\n\n";
  full += qblock;
  return full;
}

}  // namespace

void enforce_budget(PrunedPrompt& prompt, int token_limit,
                    const oracle::OracleBackend& counter) {
  const int tail_tokens =
      counter.count_tokens(compose({}, prompt.anchor, prompt.question_block));
  if (tail_tokens > token_limit)
    raise(ErrorKind::budget,
          "anchor and question alone need " + std::to_string(tail_tokens) +
              " tokens but the limit is " + std::to_string(token_limit));
  while (prompt.token_count > token_limit && !prompt.retained_ids.empty()) {
    prompt.retained_ids.pop_back();  // lowest retrieval rank goes first
    prompt.retained_texts.pop_back();
    ++prompt.dropped_for_budget;
    prompt.full_text =
        compose(prompt.retained_texts, prompt.anchor, prompt.question_block);
    prompt.token_count = counter.count_tokens(prompt.full_text);
  }
}

PrunedPrompt assemble(const ShotBatch& shots, const policy::ActionTrace& trace,
                      const std::string& anchor, const std::string& question,
                      int token_limit, const oracle::OracleBackend& counter) {
  PrunedPrompt prompt;
  prompt.anchor = anchor;
  prompt.question_block = question_block(question);
  prompt.anchor_tokens = counter.count_tokens(anchor);

  // Stage 0: everything, unpruned.
  prompt.raw_tokens =
      counter.count_tokens(compose(shots.rendered, anchor, prompt.question_block));

  // Stage 1: shot pruning only.
  std::vector<std::string> retained_rendered;
  for (std::size_t i = 0; i < trace.shot_actions.size(); ++i)
    if (trace.shot_actions[i]) retained_rendered.push_back(shots.rendered[i]);
  prompt.after_shot_tokens = counter.count_tokens(
      compose(retained_rendered, anchor, prompt.question_block));

  // Stage 2: token pruning + structural repair.
  const auto pruned = apply_pruning(shots, trace);
  for (std::size_t j = 0; j < pruned.size(); ++j) {
    std::string repaired = reconstruct(pruned[j]);
    if (trim(repaired).empty()) continue;  // nothing left of this shot
    prompt.retained_ids.push_back(shots.examples[trace.token_stage[j].shot].id);
    prompt.retained_texts.push_back(std::move(repaired));
  }
  prompt.full_text =
      compose(prompt.retained_texts, anchor, prompt.question_block);
  prompt.token_count = counter.count_tokens(prompt.full_text);
  prompt.after_token_tokens = prompt.token_count;

  enforce_budget(prompt, token_limit, counter);
  return prompt;
}

}  // namespace cotprune::assembly

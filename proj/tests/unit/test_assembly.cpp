#include <doctest.h>

#include <set>

#include "cotprune/assembly.hpp"
#include "cotprune/oracle.hpp"
#include "support/testutil.hpp"

using namespace cotprune;
using assembly::ShotBatch;
using policy::ActionTrace;

namespace {

oracle::SyntheticOracle whitespace_counter() {
  return oracle::SyntheticOracle({}, {}, {});
}

ShotBatch batch_of(const std::vector<corpus::CotExample>& shots,
                   bool protect = true) {
  encoder::MockEncoder enc(16);
  return assembly::build_shot_batch(shots, enc, protect, 256);
}

// Trace retaining every shot, with a per-token action predicate.
template <typename Fn>
ActionTrace trace_with(const ShotBatch& batch, Fn&& keep_token) {
  ActionTrace trace;
  for (std::size_t i = 0; i < batch.examples.size(); ++i) {
    trace.shot_probs.push_back(1.0);
    trace.shot_actions.push_back(1);
    policy::TokenDecisions td;
    td.shot = i;
    const auto& tok = batch.tokenized[i];
    for (std::size_t t = 0; t < tok.tokens.size(); ++t) {
      const bool keep = keep_token(i, tok, t);
      td.probs.push_back(keep ? 1.0 : 0.0);
      td.actions.push_back(keep ? 1 : 0);
      td.protected_tokens.push_back(0);
    }
    trace.token_stage.push_back(std::move(td));
  }
  return trace;
}

ActionTrace all_keep(const ShotBatch& batch) {
  return trace_with(batch, [](std::size_t, const auto&, std::size_t) { return true; });
}

std::string word_of(const std::string& text, const encoder::TokenizedExample& tok,
                    std::size_t t) {
  const auto [b, e] = tok.word_spans[tok.token_word[t]];
  return text.substr(b, e - b);
}

}  // namespace

TEST_CASE("all-keep pruning reproduces the rendered text") {
  auto planted = testutil::make_planted_corpus(3, 1, 0, 60);
  const auto batch = batch_of(planted.candidates);
  const auto texts = assembly::apply_pruning(batch, all_keep(batch));
  REQUIRE(texts.size() == batch.examples.size());
  for (std::size_t i = 0; i < texts.size(); ++i)
    CHECK(texts[i] == batch.rendered[i]);
}

TEST_CASE("pruning whole function words matches a hand-built expectation") {
  corpus::CotExample ex;
  ex.id = "fixture";
  ex.question = "Dave went with the friends to the arcade then home.";
  ex.reasoning =
      "Dave came back with the friends and then rested. The answer is 7.";
  ex.answer = "7";
  ex.difficulty = 3;
  ex.steps = 1;
  const auto batch = batch_of({ex}, /*protect=*/false);
  const std::set<std::string> victims = {"with", "the", "then"};
  const auto trace = trace_with(batch, [&](std::size_t i, const auto& tok, std::size_t t) {
    return victims.count(word_of(batch.rendered[i], tok, t)) == 0;
  });
  const auto texts = assembly::apply_pruning(batch, trace);
  REQUIRE(texts.size() == 1);
  CHECK(texts[0] ==
        "Q: Dave went friends to arcade home.\n"
        "A: Dave came back friends and rested. The answer is 7.\n");
}

TEST_CASE("an all-pruned trace yields an empty shot block") {
  auto planted = testutil::make_planted_corpus(2, 0, 1, 61);
  const auto batch = batch_of(planted.candidates);
  ActionTrace trace;
  trace.shot_probs.assign(2, 0.0);
  trace.shot_actions.assign(2, 0);
  CHECK(assembly::apply_pruning(batch, trace).empty());

  const auto counter = whitespace_counter();
  const auto prompt = assembly::assemble(batch, trace, testutil::plain_anchor(),
                                         planted.questions[0].question, 4096,
                                         counter);
  CHECK(prompt.retained_ids.empty());
  CHECK(prompt.full_text == testutil::plain_anchor() + "\n\n" +
                                assembly::question_block(
                                    planted.questions[0].question));
}

TEST_CASE("reconstruction repairs the documented damage byte-exactly") {
  CHECK(assembly::reconstruct("A: Let's step by step") ==
        "A: Let's think step by step");
  CHECK(assembly::reconstruct("\nSara purchased 2 tickets at the store.") ==
        "\nQ: Sara purchased 2 tickets at the store.");
}

TEST_CASE("reconstruction restores markers and blank lines") {
  // Lost "Q: " on the question line and lost blank line between examples.
  const std::string damaged =
      "Q: first question\n"
      "A: Let's think step by step. It is 3. The answer is 3.\n"
      "second question here\n"
      "Let's think step by step. It is 4. The answer is 4.\n";
  const std::string repaired = assembly::reconstruct(damaged);
  CHECK(contains(repaired, "\n\nQ: second question here\n"));
  CHECK(contains(repaired, "\nA: Let's think step by step. It is 4."));
}

TEST_CASE("reconstruction is idempotent on well-formed prompts") {
  auto planted = testutil::make_planted_corpus(3, 0, 1, 62);
  std::string prompt;
  for (const auto& ex : planted.candidates) prompt += corpus::render(ex) + "\n";
  prompt += testutil::plain_anchor();
  const auto once = assembly::reconstruct(prompt);
  CHECK(once == prompt);
  CHECK(assembly::reconstruct(once) == once);
}

TEST_CASE("reconstruction is idempotent on randomly mutated prompts") {
  auto planted = testutil::make_planted_corpus(4, 2, 1, 63);
  Rng rng(64);
  for (int iter = 0; iter < 60; ++iter) {
    std::string prompt;
    for (const auto& ex : planted.candidates)
      if (rng.bernoulli(0.7)) prompt += corpus::render(ex) + "\n";
    prompt += testutil::plain_anchor();

    // Structural damage.
    auto drop_all = [&](std::string_view needle) {
      std::size_t pos;
      std::string out = prompt;
      while ((pos = out.find(needle)) != std::string::npos)
        out.erase(pos, needle.size());
      prompt = out;
    };
    if (rng.bernoulli(0.5)) drop_all("Q: ");
    if (rng.bernoulli(0.4)) drop_all("A: ");
    if (rng.bernoulli(0.5)) {
      std::size_t pos = prompt.find("think ");
      if (pos != std::string::npos) prompt.erase(pos, 6);
    }
    if (rng.bernoulli(0.5)) drop_all("\n\n");

    const auto once = assembly::reconstruct(prompt);
    const auto twice = assembly::reconstruct(once);
    CHECK(twice == once);
  }
}

TEST_CASE("budget enforcement drops lowest-rank shots until the prompt fits") {
  const auto counter = whitespace_counter();
  assembly::PrunedPrompt pp;
  pp.anchor = "anchor";                       // 1 token
  pp.question_block = "Q: q\nA: go";          // 4 tokens
  for (int i = 0; i < 3; ++i) {
    pp.retained_ids.push_back("shot-" + std::to_string(i));
    pp.retained_texts.push_back("w1 w2 w3 w4 w5 w6 w7 w8 w9 w10\n");
  }
  std::string full;
  for (const auto& t : pp.retained_texts) full += t + "\n";
  full += pp.anchor + "\n\n" + pp.question_block;
  pp.full_text = full;
  pp.token_count = counter.count_tokens(full);
  REQUIRE(pp.token_count == 35);

  SUBCASE("prompt already within the limit stays untouched") {
    auto copy = pp;
    assembly::enforce_budget(copy, 40, counter);
    CHECK(copy.dropped_for_budget == 0);
    CHECK(copy.retained_ids.size() == 3);
    CHECK(copy.full_text == pp.full_text);
  }
  SUBCASE("a 25-token limit forces exactly one drop") {
    assembly::enforce_budget(pp, 25, counter);
    CHECK(pp.dropped_for_budget == 1);
    REQUIRE(pp.retained_ids.size() == 2);
    CHECK(pp.retained_ids == std::vector<std::string>{"shot-0", "shot-1"});
    CHECK(pp.token_count <= 25);
  }
  SUBCASE("a limit below anchor + question is a configuration error") {
    CHECK_THROWS_AS(assembly::enforce_budget(pp, 4, counter), Error);
  }
}

TEST_CASE("assemble composes the identity prompt for an all-keep trace") {
  auto planted = testutil::make_planted_corpus(3, 0, 1, 65);
  const auto batch = batch_of(planted.candidates);
  const auto counter = whitespace_counter();
  const std::string anchor = testutil::plain_anchor();
  const std::string question = planted.questions[0].question;
  const auto prompt =
      assembly::assemble(batch, all_keep(batch), anchor, question, 8192, counter);

  std::string expect;
  for (const auto& r : batch.rendered) expect += r + "\n";
  expect += anchor + "\n\n" + assembly::question_block(question);
  CHECK(prompt.full_text == expect);
  CHECK(prompt.dropped_for_budget == 0);
  CHECK(prompt.raw_tokens == prompt.after_shot_tokens);
  CHECK(prompt.after_shot_tokens == prompt.after_token_tokens);
  CHECK(prompt.token_count == counter.count_tokens(expect));
}

TEST_CASE("assemble keeps the anchor verbatim and the question as suffix") {
  auto planted = testutil::make_planted_corpus(4, 4, 1, 66);
  const auto batch = batch_of(planted.candidates);
  const auto counter = whitespace_counter();
  const std::string anchor = testutil::plain_anchor();
  const std::string question = planted.questions[0].question;
  Rng rng(67);
  for (int iter = 0; iter < 20; ++iter) {
    const auto trace = trace_with(batch, [&](std::size_t, const auto&, std::size_t) {
      return rng.bernoulli(0.7);
    });
    const auto prompt =
        assembly::assemble(batch, trace, anchor, question, 4096, counter);
    CHECK(contains(prompt.full_text, anchor));
    const std::string suffix = assembly::question_block(question);
    REQUIRE(prompt.full_text.size() >= suffix.size());
    CHECK(prompt.full_text.substr(prompt.full_text.size() - suffix.size()) ==
          suffix);
  }
}

TEST_CASE("stage token counts never increase and budgets always hold") {
  Rng rng(68);
  const auto counter = whitespace_counter();
  for (int iter = 0; iter < 100; ++iter) {
    auto planted = testutil::make_planted_corpus(
        2 + static_cast<int>(rng.next_below(4)),
        static_cast<int>(rng.next_below(4)), 1, 1000 + iter);
    const auto batch = batch_of(planted.candidates, rng.bernoulli(0.5));
    ActionTrace trace;
    const double keep_shot = rng.uniform(0.2, 1.0);
    const double keep_token = rng.uniform(0.2, 1.0);
    for (std::size_t i = 0; i < batch.examples.size(); ++i) {
      trace.shot_probs.push_back(keep_shot);
      trace.shot_actions.push_back(rng.bernoulli(keep_shot) ? 1 : 0);
    }
    for (std::size_t i = 0; i < batch.examples.size(); ++i) {
      if (!trace.shot_actions[i]) continue;
      policy::TokenDecisions td;
      td.shot = i;
      const auto n = batch.tokenized[i].tokens.size();
      for (std::size_t t = 0; t < n; ++t) {
        const bool prot = !batch.protected_masks.empty() &&
                          batch.protected_masks[i][t];
        const bool keep = prot || rng.bernoulli(keep_token);
        td.probs.push_back(keep_token);
        td.actions.push_back(keep ? 1 : 0);
        td.protected_tokens.push_back(prot ? 1 : 0);
      }
      trace.token_stage.push_back(std::move(td));
    }
    const std::string anchor = testutil::plain_anchor();
    const std::string question = planted.questions[0].question;
    const int tail = counter.count_tokens(anchor + "\n\n" +
                                          assembly::question_block(question));
    const int limit = tail + static_cast<int>(rng.next_below(80));
    const auto prompt =
        assembly::assemble(batch, trace, anchor, question, limit, counter);
    CHECK(prompt.raw_tokens >= prompt.after_shot_tokens);
    CHECK(prompt.after_shot_tokens >= prompt.after_token_tokens);
    CHECK(prompt.token_count <= limit);
  }
}

TEST_CASE("pruning never splits a word") {
  auto planted = testutil::make_planted_corpus(3, 3, 1, 69);
  const auto batch = batch_of(planted.candidates, false);
  Rng rng(70);
  auto alnum_runs = [](const std::string& text) {
    std::set<std::string> runs;
    std::string cur;
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        cur.push_back(c);
      } else if (!cur.empty()) {
        runs.insert(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) runs.insert(cur);
    return runs;
  };
  for (int iter = 0; iter < 30; ++iter) {
    const auto trace = trace_with(batch, [&](std::size_t, const auto&, std::size_t) {
      return rng.bernoulli(0.6);
    });
    const auto texts = assembly::apply_pruning(batch, trace);
    for (std::size_t j = 0; j < texts.size(); ++j) {
      const auto in_runs = alnum_runs(batch.rendered[trace.token_stage[j].shot]);
      for (const auto& run : alnum_runs(texts[j]))
        CHECK(in_runs.count(run) == 1);
    }
  }
}

TEST_CASE("protected markers survive pruning in every retained shot") {
  auto planted = testutil::make_planted_corpus(4, 2, 1, 71);
  const auto batch = batch_of(planted.candidates, /*protect=*/true);
  Rng rng(72);
  const auto counter = whitespace_counter();
  for (int iter = 0; iter < 10; ++iter) {
    ActionTrace trace = trace_with(batch, [&](std::size_t i, const auto&, std::size_t t) {
      return batch.protected_masks[i][t] || rng.bernoulli(0.2);
    });
    for (std::size_t i = 0; i < trace.token_stage.size(); ++i)
      trace.token_stage[i].protected_tokens = batch.protected_masks[i];
    const auto prompt = assembly::assemble(batch, trace, testutil::plain_anchor(),
                                           planted.questions[0].question, 8192,
                                           counter);
    for (const auto& text : prompt.retained_texts) {
      CHECK(contains(text, "Q:"));
      CHECK(contains(text, "A:"));
      CHECK(contains(text, "The answer is"));
      CHECK(contains(text, "Let's think step by step"));
    }
  }
}

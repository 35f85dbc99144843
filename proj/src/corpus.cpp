#include "cotprune/corpus.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cotprune::corpus {

using nlohmann::json;

namespace {

// Shared wrapper for the five rewrite schemes; {method} is replaced by the
// scheme-specific instruction, {question}/{answer} by the example fields.
constexpr std::string_view kEvolutionBase =
    "I want you to act as a Prompt Rewriter. Your objective is to rewrite a "
    "given prompt into a more complex version to make those famous AI systems "
    "(e.g., LLaMA, ChatGPT and GPT4) a bit harder to handle.\n"
    "The prompt is made up of a math reasoning question and the corresponding "
    "answer.\n"
    "The rewritten prompt must be reasonable and must be understood and "
    "responded by humans.\n"
    "Your rewriting cannot omit or change the input and results in #Given "
    "Prompt#. Also, please retain the format of 'Question: ' and 'Answer: ' "
    "in your response.\n"
    "You SHOULD complicate the given prompt using the following method:\n"
    "{method}\n"
    "You should try your best not to make the #Rewritten Prompt# become "
    "verbose, #Rewritten Prompt# can only add 10 to 20 words into #Given "
    "Prompt#.\n"
    "The #Rewritten Prompt# should also follow the format that the rewritten "
    "question appears after 'Question: ' and the rewritten answer appears "
    "after 'Answer: '.\n"
    "The rewritten answer should end up with 'The answer is [results]'.\n"
    "#Given Prompt#:\n"
    "Question: {question}\n"
    "Answer: {answer}\n"
    "#Rewritten Prompt#: ";

constexpr std::string_view kMethodAddConstraints =
    "Please add one more constraint/requirement to the question of #Given "
    "Prompt#";
constexpr std::string_view kMethodDeepening =
    "Please increase the depth and breadth of the question and answer of "
    "#Given Prompt#";
constexpr std::string_view kMethodIncreaseReasoning =
    "If #Given Prompt# can be solved with just a few simple thinking "
    "processes, please rewrite it to explicitly request multiple-step "
    "reasoning.";
constexpr std::string_view kMethodReviseDifficulty =
    "Please revise the high difficulty questions to lower difficulty.";
constexpr std::string_view kMethodProduceEasier =
    "Please produce a new and easier question with another different topic.";

constexpr std::string_view kDifficultyTemplate =
    "We would like you to evaluate and rate the difficulty and complexity of "
    "the following question. You should first give an overall score on a "
    "scale of 1 to 10, where a higher score indicates higher difficulty and "
    "complexity. You should then evaluate the answer and give how many "
    "reasoning steps are in the answer. You must just give the score and the "
    "number of reasoning steps without any other reasons. The reply format "
    "should be 'Score': [score], 'Steps: [#steps]'\n"
    "## Question: {question}\n"
    "## Answer: {answer}\n"
    "## Evaluation:";

std::string replace_once(std::string text, std::string_view slot,
                         std::string_view value) {
  auto pos = text.find(slot);
  if (pos == std::string::npos)
    raise(ErrorKind::internal, "template slot missing: " + std::string(slot));
  text.replace(pos, slot.size(), value);
  return text;
}

std::string_view scheme_method(Origin scheme) {
  switch (scheme) {
    case Origin::add_constraints: return kMethodAddConstraints;
    case Origin::deepening: return kMethodDeepening;
    case Origin::increase_reasoning: return kMethodIncreaseReasoning;
    case Origin::revise_difficulty: return kMethodReviseDifficulty;
    case Origin::produce_easier: return kMethodProduceEasier;
    case Origin::seed: break;
  }
  raise(ErrorKind::invalid, "seed is not an evolution scheme");
}

}  // namespace

std::string_view origin_name(Origin o) {
  switch (o) {
    case Origin::seed: return "seed";
    case Origin::add_constraints: return "add_constraints";
    case Origin::deepening: return "deepening";
    case Origin::increase_reasoning: return "increase_reasoning";
    case Origin::revise_difficulty: return "revise_difficulty";
    case Origin::produce_easier: return "produce_easier";
  }
  return "seed";
}

std::optional<Origin> origin_from_name(std::string_view name) {
  for (Origin o : {Origin::seed, Origin::add_constraints, Origin::deepening,
                   Origin::increase_reasoning, Origin::revise_difficulty,
                   Origin::produce_easier}) {
    if (origin_name(o) == name) return o;
  }
  return std::nullopt;
}

std::string render(const CotExample& ex) {
  std::string out;
  out.reserve(ex.question.size() + ex.reasoning.size() + 8);
  out += "Q: ";
  out += ex.question;
  out += "\nA: ";
  out += ex.reasoning;
  out += "\n";
  return out;
}

void validate(const CotExample& ex) {
  auto fail = [&](const std::string& field, const std::string& what) {
    raise(ErrorKind::invalid,
          "invalid example '" + ex.id + "': field '" + field + "' " + what);
  };
  if (ex.id.empty()) fail("id", "must be non-empty");
  if (ex.difficulty < 1 || ex.difficulty > 10)
    fail("difficulty", "must be in [1, 10], got " + std::to_string(ex.difficulty));
  if (ex.steps < 1) fail("steps", "must be >= 1, got " + std::to_string(ex.steps));
  if (ex.question.empty()) fail("question", "must be non-empty");
  for (auto [name, text] : {std::pair<const char*, const std::string*>{
                                "question", &ex.question},
                            {"reasoning", &ex.reasoning},
                            {"answer", &ex.answer}}) {
    if (text->find('\n') != std::string::npos)
      fail(name, "must not contain embedded newlines");
  }
  if (!contains(ex.reasoning, kAnswerMarker))
    fail("reasoning", "must contain the literal substring \"The answer is\"");
  // The rendered form must end "... The answer is {answer}."
  const std::string expected_tail =
      std::string(kAnswerMarker) + " " + ex.answer + ".";
  if (ex.reasoning.size() < expected_tail.size() ||
      ex.reasoning.compare(ex.reasoning.size() - expected_tail.size(),
                           expected_tail.size(), expected_tail) != 0)
    fail("reasoning", "must end with \"The answer is " + ex.answer + ".\"");
}

std::string to_json_line(const CotExample& ex) {
  json j{{"id", ex.id},
         {"question", ex.question},
         {"reasoning", ex.reasoning},
         {"answer", ex.answer},
         {"difficulty", ex.difficulty},
         {"steps", ex.steps},
         {"origin", std::string(origin_name(ex.origin))}};
  return j.dump();
}

CotExample from_json_line(std::string_view line) {
  json j = json::parse(line);  // throws json::parse_error
  CotExample ex;
  for (const char* key :
       {"id", "question", "reasoning", "answer", "difficulty", "steps", "origin"}) {
    if (!j.contains(key))
      raise(ErrorKind::parse, std::string("record missing field '") + key + "'");
  }
  ex.id = j.at("id").get<std::string>();
  ex.question = j.at("question").get<std::string>();
  ex.reasoning = j.at("reasoning").get<std::string>();
  ex.answer = j.at("answer").get<std::string>();
  ex.difficulty = j.at("difficulty").get<int>();
  ex.steps = j.at("steps").get<int>();
  auto origin = origin_from_name(j.at("origin").get<std::string>());
  if (!origin)
    raise(ErrorKind::parse,
          "record '" + ex.id + "': unknown origin '" +
              j.at("origin").get<std::string>() + "'");
  ex.origin = *origin;
  return ex;
}

std::vector<CotExample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::io, "cannot open corpus file: " + path);
  std::vector<CotExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const json::exception& e) {
      raise(ErrorKind::parse,
            path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::parse)
        raise(ErrorKind::parse,
              path + ":" + std::to_string(line_no) + ": " + e.what());
      throw;
    }
    validate(out.back());
  }
  return out;
}

void save_corpus(const std::string& path, const std::vector<CotExample>& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write corpus file: " + path);
  for (const auto& ex : data) out << to_json_line(ex) << "\n";
  if (!out) raise(ErrorKind::io, "write failed: " + path);
}

CorpusSplit split_corpus(const std::vector<CotExample>& data, int d_thr) {
  if (d_thr < 1 || d_thr > 10)
    raise(ErrorKind::invalid,
          "difficulty threshold must be in [1, 10], got " + std::to_string(d_thr));
  CorpusSplit split;
  split.threshold = d_thr;
  for (const auto& ex : data) {
    if (ex.difficulty <= d_thr)
      split.questions.push_back(ex);
    else
      split.candidates.push_back(ex);
  }
  return split;
}

std::string_view evolution_template(Origin scheme) {
  (void)scheme_method(scheme);  // reject seed
  return kEvolutionBase;
}

std::string_view difficulty_template() { return kDifficultyTemplate; }

std::string render_evolution_prompt(const CotExample& ex, Origin scheme) {
  std::string text = replace_once(std::string(kEvolutionBase), "{method}",
                                  scheme_method(scheme));
  text = replace_once(std::move(text), "{question}", ex.question);
  text = replace_once(std::move(text), "{answer}", ex.reasoning);
  return text;
}

std::string render_difficulty_prompt(const CotExample& ex) {
  std::string text =
      replace_once(std::string(kDifficultyTemplate), "{question}", ex.question);
  text = replace_once(std::move(text), "{answer}", ex.reasoning);
  return text;
}

DifficultyReply parse_difficulty_reply(std::string_view reply) {
  auto first_int_after = [&](std::string_view marker) -> std::optional<int> {
    auto pos = reply.find(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    size_t i = pos + marker.size();
    while (i < reply.size() && !std::isdigit(static_cast<unsigned char>(reply[i])))
      ++i;
    if (i >= reply.size()) return std::nullopt;
    int value = 0;
    while (i < reply.size() && std::isdigit(static_cast<unsigned char>(reply[i]))) {
      value = value * 10 + (reply[i] - '0');
      if (value > 1000000) break;
      ++i;
    }
    return value;
  };
  auto score = first_int_after("Score");
  auto steps = first_int_after("Steps");
  if (!score || !steps)
    raise(ErrorKind::parse,
          "difficulty reply lacks 'Score'/'Steps' integers: " +
              std::string(reply.substr(0, 120)));
  DifficultyReply out;
  out.difficulty = std::max(1, std::min(10, *score));
  out.steps = *steps;
  return out;
}

std::uint64_t corpus_hash(const std::vector<CotExample>& data) {
  std::uint64_t h = fnv1a64("corpus-v1");
  for (const auto& ex : data) {
    h = fnv1a64(ex.id, h);
    h = fnv1a64(render(ex), h);
    h = fnv1a64(ex.answer, h);
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(ex.difficulty));
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(ex.steps));
    h = fnv1a64(origin_name(ex.origin), h);
  }
  return h;
}

}  // namespace cotprune::corpus

#include "cotprune/oracle.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <httplib.h>
#include <json.hpp>

namespace cotprune::oracle {

using nlohmann::json;

int whitespace_tokens(std::string_view text) {
  int count = 0;
  bool in_token = false;
  for (char c : text) {
    const bool ws = std::isspace(static_cast<unsigned char>(c));
    if (!ws && !in_token) ++count;
    in_token = !ws;
  }
  return count;
}

std::optional<std::string> extract_answer(std::string_view generated) {
  const auto pos = generated.rfind(corpus::kAnswerMarker);
  if (pos == std::string_view::npos) return std::nullopt;
  std::string_view rest = generated.substr(pos + corpus::kAnswerMarker.size());
  while (!rest.empty() && std::isspace(static_cast<unsigned char>(rest.front())))
    rest.remove_prefix(1);
  while (!rest.empty() && std::isspace(static_cast<unsigned char>(rest.back())))
    rest.remove_suffix(1);
  if (!rest.empty() && rest.back() == '.') rest.remove_suffix(1);
  while (!rest.empty() && std::isspace(static_cast<unsigned char>(rest.back())))
    rest.remove_suffix(1);
  return std::string(rest);
}

namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)); }

// Parses an optionally signed decimal at the start of `s`. On success returns
// the canonical form ("-0" -> "0", no leading zeros, no trailing fraction
// zeros) and sets `consumed`.
std::optional<std::string> canonical_decimal(std::string_view s, std::size_t& consumed) {
  std::size_t i = 0;
  bool negative = false;
  if (i < s.size() && (s[i] == '-' || s[i] == '+')) {
    negative = s[i] == '-';
    ++i;
  }
  std::string int_part, frac_part;
  while (i < s.size() && is_digit(s[i])) int_part.push_back(s[i++]);
  if (i < s.size() && s[i] == '.') {
    std::size_t j = i + 1;
    std::string frac;
    while (j < s.size() && is_digit(s[j])) frac.push_back(s[j++]);
    if (!frac.empty()) {
      frac_part = frac;
      i = j;
    }
  }
  if (int_part.empty() && frac_part.empty()) return std::nullopt;
  consumed = i;
  // Canonicalize.
  std::size_t nz = 0;
  while (nz + 1 < int_part.size() && int_part[nz] == '0') ++nz;
  int_part = int_part.empty() ? "0" : int_part.substr(nz);
  while (!frac_part.empty() && frac_part.back() == '0') frac_part.pop_back();
  std::string out = int_part;
  if (!frac_part.empty()) out += "." + frac_part;
  const bool is_zero = out == "0";
  if (negative && !is_zero) out.insert(out.begin(), '-');
  return out;
}

bool is_unit_tail(std::string_view s) {
  // Whitespace-separated alphabetic words only ("hours", "square meters").
  bool saw_alpha = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    if (!std::isalpha(static_cast<unsigned char>(c))) return false;
    saw_alpha = true;
  }
  return saw_alpha;
}

std::string collapse_spaces(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

std::vector<std::string> lower_alnum_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

bool is_numeric_word(std::string_view w) {
  if (w.empty()) return false;
  for (char c : w)
    if (!is_digit(c)) return false;
  return true;
}

}  // namespace

std::string normalize_answer(std::string_view answer) {
  std::string s(trim(answer));
  // One trailing sentence period.
  if (!s.empty() && s.back() == '.') {
    // Keep a decimal point that still has digits after it elsewhere; a bare
    // trailing '.' is sentence punctuation.
    s.pop_back();
    s = std::string(trim(s));
  }
  // Currency symbols (ASCII and common UTF-8 sequences).
  for (std::string_view sym : {"$", "\xc2\xa3" /* pound */, "\xe2\x82\xac" /* euro */,
                               "\xc2\xa5" /* yen */}) {
    std::size_t pos;
    while ((pos = s.find(sym)) != std::string::npos) s.erase(pos, sym.size());
  }
  // Thousands separators.
  std::erase(s, ',');
  s = std::string(trim(s));
  s = to_lower(s);

  std::size_t consumed = 0;
  auto canon = canonical_decimal(s, consumed);
  if (canon) {
    std::string_view tail = std::string_view(s).substr(consumed);
    if (trim(tail).empty()) return *canon;
    if (is_unit_tail(tail)) return *canon;  // "4 hours" -> "4"
  }
  return collapse_spaces(s);
}

bool exact_match(std::string_view predicted, std::string_view gold) {
  return normalize_answer(predicted) == normalize_answer(gold);
}

// ---------------------------------------------------------------------------
// Synthetic oracle
// ---------------------------------------------------------------------------

const std::vector<std::string>& default_filler_words() {
  static const std::vector<std::string> words = {
      "with", "the",  "then",   "a",     "an",   "of",    "to",
      "and",  "that", "just",   "very",  "some", "quite", "really",
      "also", "so",   "indeed", "thus",  "now",  "well"};
  return words;
}

SyntheticOracle::SyntheticOracle(SyntheticOracleSpec spec,
                                 std::vector<corpus::CotExample> candidates,
                                 std::vector<corpus::CotExample> questions)
    : spec_(std::move(spec)) {
  const auto& filler_src =
      spec_.filler_words.empty() ? default_filler_words() : spec_.filler_words;
  for (const auto& w : filler_src) filler_.insert(to_lower(w));

  std::set<std::string> gold_set(spec_.gold_ids.begin(), spec_.gold_ids.end());
  for (const auto& ex : candidates) {
    CandidateInfo info;
    info.id = ex.id;
    for (auto& w : lower_alnum_words(ex.question)) info.question_words.insert(w);
    for (auto& w : lower_alnum_words(corpus::render(ex)))
      if (is_numeric_word(w)) info.numerals.push_back(w);
    info.gold = gold_set.empty() || gold_set.count(ex.id) > 0;
    if (info.gold) ++gold_count_;
    candidates_.push_back(std::move(info));
  }
  for (const auto& ex : questions) question_difficulty_[ex.question] = ex.difficulty;
  // Questions may double as candidates in small corpora.
  for (const auto& ex : candidates)
    question_difficulty_.emplace(ex.question, ex.difficulty);

  required_gold_ = spec_.required_gold >= 0
                       ? spec_.required_gold
                       : static_cast<int>((gold_count_ + 1) / 2);
}

std::vector<std::string> SyntheticOracle::detect_retained(
    const std::string& prompt) const {
  std::set<std::string> prompt_words;
  for (auto& w : lower_alnum_words(prompt)) prompt_words.insert(std::move(w));
  std::vector<std::string> retained;
  for (const auto& c : candidates_) {
    if (c.question_words.empty()) continue;
    std::size_t present = 0;
    for (const auto& w : c.question_words) present += prompt_words.count(w);
    const double fraction = static_cast<double>(present) /
                            static_cast<double>(c.question_words.size());
    if (fraction >= spec_.detect_threshold) retained.push_back(c.id);
  }
  return retained;
}

OracleResponse SyntheticOracle::answer_math(const std::string& prompt,
                                            const std::string& gold_answer) const {
  const auto prompt_words = lower_alnum_words(prompt);
  std::set<std::string> prompt_word_set(prompt_words.begin(), prompt_words.end());

  // Shot detection: a candidate survives if enough of its question words do.
  std::size_t retained_total = 0, retained_gold = 0;
  std::map<std::string, int> expected_numerals;
  for (const auto& c : candidates_) {
    if (c.question_words.empty()) continue;
    std::size_t present = 0;
    for (const auto& w : c.question_words) present += prompt_word_set.count(w);
    const double fraction = static_cast<double>(present) /
                            static_cast<double>(c.question_words.size());
    if (fraction < spec_.detect_threshold) continue;
    ++retained_total;
    if (c.gold) ++retained_gold;
    for (const auto& n : c.numerals) expected_numerals[n]++;
  }

  // Filler fraction over all prompt words.
  std::size_t filler_count = 0;
  std::map<std::string, int> present_numerals;
  for (const auto& w : prompt_words) {
    if (filler_.count(w)) ++filler_count;
    if (is_numeric_word(w)) present_numerals[w]++;
  }
  const double filler_fraction =
      prompt_words.empty() ? 0.0
                           : static_cast<double>(filler_count) /
                                 static_cast<double>(prompt_words.size());

  // Fraction of numerals from detected shots that no longer appear.
  int expected_total = 0, missing = 0;
  for (const auto& [n, count] : expected_numerals) {
    expected_total += count;
    auto it = present_numerals.find(n);
    const int present = it == present_numerals.end() ? 0 : it->second;
    missing += std::max(0, count - present);
  }
  const double missing_fraction =
      expected_total == 0 ? 0.0
                          : static_cast<double>(missing) /
                                static_cast<double>(expected_total);

  const auto& curve = spec_.curve;
  const double loss =
      std::max(curve.floor,
               curve.base - curve.gold_gain * static_cast<double>(retained_gold)) +
      curve.filler_weight * filler_fraction +
      curve.numeral_weight * missing_fraction;

  // Planted difficulty gate for the final question.
  int difficulty = 1;
  const auto qpos = prompt.rfind("Q: ");
  if (qpos != std::string::npos) {
    auto eol = prompt.find('\n', qpos);
    std::string question = prompt.substr(
        qpos + 3, eol == std::string::npos ? std::string::npos : eol - qpos - 3);
    auto it = question_difficulty_.find(question);
    if (it != question_difficulty_.end()) difficulty = it->second;
  }

  bool correct = static_cast<int>(retained_gold) >= required_gold_ &&
                 filler_fraction <= spec_.filler_max &&
                 difficulty <= spec_.difficulty_cap;
  if (spec_.noise > 0.0) {
    Rng rng(derive_seed(spec_.seed, fnv1a64(prompt)));
    if (rng.next_double() < spec_.noise) correct = !correct;
  }

  OracleResponse out;
  out.answer_loss = loss;
  out.prompt_tokens = whitespace_tokens(prompt);
  if (retained_total == 0) {
    // Nothing recognizable survived: the model loses the plot entirely.
    out.generated = "I am not sure I can follow the examples given here.";
  } else if (correct) {
    out.generated =
        "Let's think step by step. Following the worked examples gives the "
        "result. The answer is " +
        gold_answer + ".";
  } else {
    std::string wrong;
    std::size_t consumed = 0;
    auto canon = canonical_decimal(normalize_answer(gold_answer), consumed);
    if (canon)
      wrong = *canon + "1";  // a strictly different number
    else
      wrong = "not " + gold_answer;
    out.generated =
        "Let's think step by step. This looks familiar but the steps do not "
        "line up. The answer is " +
        wrong + ".";
  }
  return out;
}

OracleResponse SyntheticOracle::answer_difficulty(const std::string& prompt) const {
  auto section = [&](std::string_view marker) -> std::string {
    auto pos = prompt.find(marker);
    if (pos == std::string::npos) return {};
    auto eol = prompt.find('\n', pos);
    return prompt.substr(pos + marker.size(),
                         eol == std::string::npos ? std::string::npos
                                                  : eol - pos - marker.size());
  };
  const std::string question = section("## Question: ");
  const std::string answer = section("## Answer: ");

  const auto qwords = lower_alnum_words(question);
  int numbers = 0;
  for (const auto& w : qwords) numbers += is_numeric_word(w) ? 1 : 0;
  for (const auto& w : lower_alnum_words(answer)) numbers += is_numeric_word(w) ? 1 : 0;
  const int difficulty = std::clamp(
      1 + static_cast<int>(qwords.size()) / 12 + numbers / 4, 1, 10);
  int sentences = 0;
  for (std::size_t i = 0; i + 1 < answer.size(); ++i)
    if (answer[i] == '.' && answer[i + 1] == ' ') ++sentences;
  const int steps = std::clamp(sentences + 1, 1, 20);

  OracleResponse out;
  out.generated = "Score: " + std::to_string(difficulty) +
                  ", Steps: " + std::to_string(steps);
  out.answer_loss = 0.0;
  out.prompt_tokens = whitespace_tokens(prompt);
  return out;
}

OracleResponse SyntheticOracle::answer_evolution(const std::string& prompt) const {
  // The instruction text itself quotes 'Question: '/'Answer: '; anchor the
  // extraction on line starts.
  auto section = [&](std::string_view marker) -> std::string {
    auto pos = prompt.find(marker);
    if (pos == std::string::npos) return {};
    pos += 1;  // past the newline
    auto eol = prompt.find('\n', pos);
    return prompt.substr(pos + marker.size() - 1,
                         eol == std::string::npos ? std::string::npos
                                                  : eol - pos - marker.size() + 1);
  };
  const std::string question = section("\nQuestion: ");
  const std::string answer = section("\nAnswer: ");

  std::string evolved = question;
  if (contains(prompt, "add one more constraint"))
    evolved += " Assume nothing else changes.";
  else if (contains(prompt, "increase the depth and breadth"))
    evolved = "Consider carefully: " + evolved;
  else if (contains(prompt, "multiple-step reasoning"))
    evolved += " Work through each step explicitly.";
  else if (contains(prompt, "lower difficulty"))
    evolved += " Keep the computation simple.";
  else if (contains(prompt, "easier question with another different topic"))
    evolved = "Here is a simpler variant: " + evolved;

  OracleResponse out;
  out.generated = "Question: " + evolved + "\nAnswer: " + answer;
  out.answer_loss = 0.0;
  out.prompt_tokens = whitespace_tokens(prompt);
  return out;
}

OracleResponse SyntheticOracle::query(const std::string& prompt,
                                      const std::string& gold_answer,
                                      const GenerationParams&) const {
  if (prompt.empty()) raise(ErrorKind::invalid, "prompt must be non-empty");
  if (contains(prompt, "rate the difficulty and complexity"))
    return answer_difficulty(prompt);
  if (contains(prompt, "act as a Prompt Rewriter"))
    return answer_evolution(prompt);
  return answer_math(prompt, gold_answer);
}

int SyntheticOracle::count_tokens(const std::string& text) const {
  return whitespace_tokens(text);
}

std::uint64_t SyntheticOracle::state_hash() const {
  std::uint64_t h = fnv1a64("synthetic-oracle-v1");
  for (const auto& id : spec_.gold_ids) h = fnv1a64(id, h);
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.noise * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.curve.base * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.curve.gold_gain * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.curve.filler_weight * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.curve.numeral_weight * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.detect_threshold * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.filler_max * 1e9));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(required_gold_));
  h = fnv1a64_mix(h, static_cast<std::uint64_t>(spec_.difficulty_cap));
  h = fnv1a64_mix(h, spec_.seed);
  for (const auto& w : filler_) h = fnv1a64(w, h);
  for (const auto& c : candidates_) {
    h = fnv1a64(c.id, h);
    h = fnv1a64_mix(h, c.gold);
    for (const auto& w : c.question_words) h = fnv1a64(w, h);
    for (const auto& n : c.numerals) h = fnv1a64(n, h);
  }
  for (const auto& [q, d] : question_difficulty_) {
    h = fnv1a64(q, h);
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(d));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Remote oracle
// ---------------------------------------------------------------------------

struct RemoteOracle::Impl {
  Options opts;
  std::string host;
  int port = 80;
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

struct Endpoint {
  std::string host;
  int port = 80;
  int timeout_ms = 60000;
  int retries = 2;
  std::string auth_token;
  std::string base_url;
};

json post_json(const Endpoint& ep, const std::string& path, const json& req) {
  httplib::Client cli(ep.host, ep.port);
  cli.set_connection_timeout(ep.timeout_ms / 1000, (ep.timeout_ms % 1000) * 1000);
  cli.set_read_timeout(ep.timeout_ms / 1000, (ep.timeout_ms % 1000) * 1000);
  httplib::Headers headers;
  if (!ep.auth_token.empty())
    headers.emplace("Authorization", "Bearer " + ep.auth_token);

  httplib::Result res;
  for (int attempt = 0; attempt <= ep.retries; ++attempt) {
    res = cli.Post(path.c_str(), headers, req.dump(), "application/json");
    if (res) break;
  }
  if (!res)
    raise(ErrorKind::transport,
          "oracle service unreachable at " + ep.base_url + path);
  if (res->status == 413 || res->status == 422) {
    // The model refused the prompt as too long; budget enforcement upstream
    // should have prevented this.
    raise(ErrorKind::budget,
          "oracle rejected the prompt for context length (HTTP " +
              std::to_string(res->status) + ")");
  }
  if (res->status != 200)
    raise(ErrorKind::transport,
          "oracle service returned HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body);
  } catch (const json::exception& e) {
    raise(ErrorKind::malformed, std::string("oracle response is not JSON: ") + e.what());
  }
}
}  // namespace

RemoteOracle::RemoteOracle(Options opts) : impl_(std::make_unique<Impl>()) {
  if (opts.base_url.empty())
    raise(ErrorKind::config, "remote oracle requires a base URL");
  impl_->opts = std::move(opts);
  split_base_url(impl_->opts.base_url, impl_->host, impl_->port);
}

RemoteOracle::~RemoteOracle() = default;

OracleResponse RemoteOracle::query(const std::string& prompt,
                                   const std::string& gold_answer,
                                   const GenerationParams& gen) const {
  if (prompt.empty()) raise(ErrorKind::invalid, "prompt must be non-empty");
  const std::string continuation =
      gold_answer.empty() ? std::string{}
                          : " The answer is " + gold_answer + ".";
  json req{{"prompt", prompt},
           {"continuation", continuation},
           {"max_new_tokens", gen.max_new_tokens},
           {"temperature", gen.temperature},
           {"top_p", gen.top_p},
           {"top_k", gen.top_k},
           {"num_beams", gen.num_beams},
           {"seed", gen.seed}};
  json body = post_json({impl_->host, impl_->port, impl_->opts.timeout_ms,
                         impl_->opts.retries, impl_->opts.auth_token,
                         impl_->opts.base_url},
                        "/v1/score", req);
  for (const char* key :
       {"generated_text", "continuation_token_logprobs", "prompt_token_count"}) {
    if (!body.contains(key))
      raise(ErrorKind::malformed,
            std::string("oracle response missing field '") + key + "'");
  }
  OracleResponse out;
  out.generated = body.at("generated_text").get<std::string>();
  out.prompt_tokens = body.at("prompt_token_count").get<int>();
  const auto& lps = body.at("continuation_token_logprobs");
  if (!lps.empty()) {
    double sum = 0.0;
    for (const auto& v : lps) {
      const double lp = v.get<double>();
      if (!std::isfinite(lp))
        raise(ErrorKind::malformed, "non-finite continuation logprob");
      sum += lp;
    }
    out.answer_loss = std::max(0.0, -sum / static_cast<double>(lps.size()));
  }
  return out;
}

int RemoteOracle::count_tokens(const std::string& text) const {
  json body = post_json({impl_->host, impl_->port, impl_->opts.timeout_ms,
                         impl_->opts.retries, impl_->opts.auth_token,
                         impl_->opts.base_url},
                        "/v1/count_tokens", json{{"text", text}});
  if (!body.contains("count"))
    raise(ErrorKind::malformed, "count_tokens response missing 'count'");
  return body.at("count").get<int>();
}

std::uint64_t RemoteOracle::state_hash() const {
  return fnv1a64(impl_->opts.base_url, fnv1a64("remote-oracle-v1"));
}

}  // namespace cotprune::oracle

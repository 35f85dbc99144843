#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cotprune/common.hpp"

namespace cotprune::corpus {

// Provenance of an example: seed data or one of the five mutation schemes.
enum class Origin {
  seed,
  add_constraints,
  deepening,
  increase_reasoning,
  revise_difficulty,
  produce_easier,
};

constexpr std::array<Origin, 5> kEvolutionSchemes{
    Origin::add_constraints, Origin::deepening, Origin::increase_reasoning,
    Origin::revise_difficulty, Origin::produce_easier};

std::string_view origin_name(Origin o);
std::optional<Origin> origin_from_name(std::string_view name);

// One question / step-by-step solution / final answer record.
struct CotExample {
  std::string id;
  std::string question;
  std::string reasoning;  // must contain "The answer is"
  std::string answer;     // final value as written after "The answer is"
  int difficulty = 1;     // 1..10
  int steps = 1;          // >= 1
  Origin origin = Origin::seed;
};

// "Q: {question}\nA: {reasoning}\n"
std::string render(const CotExample& ex);

// Throws Error{invalid} naming the offending field and id.
void validate(const CotExample& ex);

struct CorpusSplit {
  std::vector<CotExample> questions;   // difficulty <= threshold
  std::vector<CotExample> candidates;  // difficulty > threshold
  int threshold = 0;
};

// Line-delimited JSON records; order preserved; every record validated.
std::vector<CotExample> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<CotExample>& data);

// JSON (de)serialization of a single record, shared with load/save.
std::string to_json_line(const CotExample& ex);
CotExample from_json_line(std::string_view line);

// Partition by difficulty threshold; relative order preserved in both parts.
CorpusSplit split_corpus(const std::vector<CotExample>& data, int d_thr);

// Prompt templates. Rendering is byte-exact against the files under
// assets/prompts/, which hold the same template text.
std::string render_evolution_prompt(const CotExample& ex, Origin scheme);
std::string render_difficulty_prompt(const CotExample& ex);

// Template text with {method}/{question}/{answer} placeholders still in place.
std::string_view evolution_template(Origin scheme);
std::string_view difficulty_template();

struct DifficultyReply {
  int difficulty = 0;  // clamped to [1, 10]
  int steps = 0;
};

// Lenient extraction: first integer after "Score", first integer after
// "Steps". Throws Error{parse} when either is missing.
DifficultyReply parse_difficulty_reply(std::string_view reply);

// Structural markers that prompt assembly protects and reconstruction repairs.
inline constexpr std::array<std::string_view, 4> kStructuralMarkers{
    "Q:", "A:", "Let's think step by step", "The answer is"};

inline constexpr std::string_view kAnswerMarker = "The answer is";

// Stable content hash of a corpus (order-sensitive); used for index caching.
std::uint64_t corpus_hash(const std::vector<CotExample>& data);

}  // namespace cotprune::corpus

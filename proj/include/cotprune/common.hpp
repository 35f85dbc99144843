#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cotprune {

enum class ErrorKind {
  io,         // file missing/unreadable
  parse,      // malformed input data
  invalid,    // contract violation (bad argument, invariant breach)
  transport,  // backend unreachable (retryable)
  malformed,  // backend reachable but response unusable
  budget,     // context-length rejection / budget configuration error
  config,     // configuration validation failure
  internal,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

// ---------------------------------------------------------------------------
// Deterministic hashing / RNG.
//
// std::hash and the std <random> distributions are implementation-defined, so
// everything that must reproduce bit-exactly across runs and platforms goes
// through FNV-1a and SplitMix64 instead.
// ---------------------------------------------------------------------------

constexpr std::uint64_t fnv1a64(std::string_view s,
                                std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t fnv1a64_mix(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffULL;
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Every random stream in the project is derived from one master seed through
// these two functions (documented in the README).
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  return splitmix64(base ^ fnv1a64(label));
}
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t n) {
  return splitmix64(base ^ (n * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL));
}

// SplitMix64 stream. Small state, full 2^64 period, portable output.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_++); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return next_u64() % n;
  }

private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Small string helpers shared across modules.
// ---------------------------------------------------------------------------

inline std::string_view trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline bool contains(std::string_view haystack, std::string_view needle) {
  return haystack.find(needle) != std::string_view::npos;
}

}  // namespace cotprune

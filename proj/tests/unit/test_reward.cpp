#include <doctest.h>

#include <cmath>

#include "cotprune/reward.hpp"
#include "support/testutil.hpp"

using namespace cotprune;
using reward::EmaState;
using reward::LengthExponents;

TEST_CASE("accuracy outcome distinguishes correct, wrong, and irrelevant") {
  CHECK(reward::accuracy_outcome("Dave has 16 tickets. The answer is 16.", "16") ==
        1.0);
  CHECK(reward::accuracy_outcome("The answer is 15.", "16") == 0.0);
  CHECK(reward::accuracy_outcome("I cannot help with that", "16") == -0.1);
}

TEST_CASE("length factor penalizes both short and over-budget prompts") {
  CHECK(reward::length_factor(100, 100) == 1.0);
  CHECK(reward::length_factor(2048, 2048, {2.5, -3.0, 1e-6}) == 1.0);
  CHECK(reward::length_factor(50, 100, {1.0, -1.0, 1e-6}) == doctest::Approx(0.5));
  CHECK(reward::length_factor(200, 100, {1.0, -1.0, 1e-6}) == doctest::Approx(0.5));
  CHECK(reward::length_factor(0, 100) == doctest::Approx(1e-6));

  SUBCASE("continuous at t = T") {
    const LengthExponents exps{1.7, -2.3, 1e-6};
    const double below = reward::length_factor(9999, 10000, exps);
    const double at = reward::length_factor(10000, 10000, exps);
    const double above = reward::length_factor(10001, 10000, exps);
    CHECK(at == 1.0);
    CHECK(std::abs(below - at) < 1e-3);
    CHECK(std::abs(above - at) < 1e-3);
  }
  SUBCASE("exponent sign conventions are enforced") {
    CHECK_THROWS_AS(reward::length_factor(10, 100, {-1.0, -1.0, 1e-6}), Error);
    CHECK_THROWS_AS(reward::length_factor(10, 100, {1.0, 1.0, 1e-6}), Error);
  }
}

TEST_CASE("reward algebra reproduces the anchor cases exactly") {
  const int T = 2048;
  CHECK(reward::compute_reward(0.0, 1.0, T, T).total == 2.0);
  CHECK(reward::compute_reward(1.0, 0.0, T, T).total == 0.5);
  CHECK(reward::compute_reward(0.0, -0.1, T, T).total == 0.9);
  CHECK_THROWS_AS(reward::compute_reward(-0.5, 1.0, T, T), Error);
}

TEST_CASE("reward decreases strictly as the loss grows") {
  double prev = std::numeric_limits<double>::infinity();
  for (double loss : {0.0, 0.3, 1.0, 2.5, 7.0, 30.0}) {
    const double total = reward::compute_reward(loss, 1.0, 1500, 2048).total;
    CHECK(total < prev);
    prev = total;
  }
}

TEST_CASE("reward magnitude is bounded by 2 within the budget") {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const double loss = rng.uniform(0.0, 50.0);
    const double acc = std::vector<double>{1.0, 0.0, -0.1}[rng.next_below(3)];
    const int T = 2048;
    const int t = static_cast<int>(rng.next_below(T + 1));
    const auto r = reward::compute_reward(loss, acc, t, T);
    CHECK(std::abs(r.total) <= 2.0);
    CHECK(r.total == doctest::Approx((1.0 / (1.0 + loss) + acc) * r.length_factor));
  }
}

TEST_CASE("ema follows the standard update rule") {
  EmaState st;
  st.decay = 0.9;
  st = reward::ema_update(st, 1.0);
  CHECK(st.value == 1.0);  // first observation initializes
  st.value = 0.0;
  st.initialized = true;
  st = reward::ema_update(st, 1.0);
  CHECK(st.value == doctest::Approx(0.1));

  SUBCASE("a constant stream converges geometrically") {
    EmaState s{.value = 0.0, .decay = 0.9, .initialized = true};
    for (int i = 0; i < 100; ++i) s = reward::ema_update(s, 1.0);
    // |value - 1| = 0.9^100 ~ 2.66e-5 < 1e-3
    CHECK(std::abs(s.value - 1.0) < 1e-3);
    CHECK(std::abs(s.value - 1.0) == doctest::Approx(std::pow(0.9, 100)));
  }
  SUBCASE("each update is a contraction toward the observation") {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
      EmaState s{.value = rng.uniform(-2, 2), .decay = rng.uniform(0.05, 0.95),
                 .initialized = true};
      const double obs = rng.uniform(-2, 2);
      const double before = std::abs(s.value - obs);
      const auto after = reward::ema_update(s, obs);
      CHECK(std::abs(after.value - obs) <= s.decay * before + 1e-12);
    }
  }
}

#include <doctest.h>

#include <cmath>

#include "dwts/math_util.hpp"
#include "dwts/rng.hpp"
#include "oracles.hpp"

using dwts::RandomStream;

TEST_CASE("normal_quantile matches bisection oracle") {
  for (double p : {0.001, 0.025, 0.1, 0.5, 0.75, 0.975, 0.995, 0.9999}) {
    CHECK(dwts::normal_quantile(p) ==
          doctest::Approx(oracles::normal_quantile_bisect(p)).epsilon(1e-10));
  }
  CHECK(dwts::normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK_THROWS(dwts::normal_quantile(0.0));
  CHECK_THROWS(dwts::normal_quantile(1.0));
}

TEST_CASE("type-7 quantiles") {
  std::vector<double> v{3.0, 1.0, 2.0};
  CHECK(dwts::quantile_type7(v, 0.5) == doctest::Approx(2.0));
  CHECK(dwts::quantile_type7(v, 0.1) == doctest::Approx(1.2));
  CHECK(dwts::quantile_type7(v, 0.9) == doctest::Approx(2.8));
  CHECK(dwts::quantile_type7({5.0}, 0.33) == doctest::Approx(5.0));
  CHECK(dwts::quantile_type7({1.0, 2.0}, 1.0) == doctest::Approx(2.0));
  CHECK_THROWS(dwts::quantile_type7({}, 0.5));
}

TEST_CASE("streams are keyed, not positional") {
  RandomStream a(42);
  RandomStream before = a.child("offline").child(3);
  // Consuming draws from unrelated streams must not shift child derivation.
  RandomStream other = a.child("noise");
  for (int i = 0; i < 100; ++i) other.gaussian();
  RandomStream after = a.child("offline").child(3);
  for (int i = 0; i < 32; ++i) {
    CHECK(before.next_u64() == after.next_u64());
  }
}

TEST_CASE("distinct labels give distinct streams") {
  RandomStream a(7);
  RandomStream s1 = a.child("params");
  RandomStream s2 = a.child("offline");
  int equal = 0;
  for (int i = 0; i < 16; ++i) equal += (s1.next_u64() == s2.next_u64());
  CHECK(equal == 0);
}

TEST_CASE("gaussian moments") {
  RandomStream rng(123);
  const int n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = rng.gaussian();
    sum += g;
    sum_sq += g * g;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(sd - 1.0) < 0.02);
}

TEST_CASE("uniform_int stays in range and covers") {
  RandomStream rng(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = rng.uniform_int(7);
    REQUIRE(v < 7);
    ++counts[static_cast<std::size_t>(v)];
  }
  for (int c : counts) CHECK(c > 700);
}

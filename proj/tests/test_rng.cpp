#include <catch2/catch_amalgamated.hpp>

#include "missfactor/rng.hpp"

#include <cmath>
#include <vector>

using namespace missfactor;

TEST_CASE("identical seeds give identical streams", "[rng]") {
  RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.uniform() == b.uniform());
}

TEST_CASE("substream paths decorrelate draws", "[rng]") {
  RngStream a(42, {1, 7}), b(42, {1, 8}), c(42, {2, 7});
  int equal_ab = 0, equal_ac = 0;
  for (int i = 0; i < 64; ++i) {
    const double ua = a.uniform(), ub = b.uniform(), uc = c.uniform();
    equal_ab += ua == ub;
    equal_ac += ua == uc;
  }
  REQUIRE(equal_ab == 0);
  REQUIRE(equal_ac == 0);
}

TEST_CASE("same path reproduces the substream", "[rng]") {
  RngStream a(7, {3, 11}), b(7, {3, 11});
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
}

TEST_CASE("uniform stays inside the half-open unit interval", "[rng]") {
  RngStream r(1);
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < 10000; ++i) REQUIRE(r.uniform_pos() > 0.0);
}

TEST_CASE("normal deviates match first two moments", "[rng]") {
  RngStream r(3);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  REQUIRE(std::abs(mean) < 4.0 / std::sqrt(double(n)));
  REQUIRE(var == Catch::Approx(1.0).margin(0.02));
  // the spare Box-Muller deviate belongs to the stream, not the call site
  RngStream r2(3), r3(3);
  r2.normal();
  r3.normal();
  REQUIRE(r2.normal() == r3.normal());
}

TEST_CASE("scaled normal applies mean and sd", "[rng]") {
  RngStream a(9), b(9);
  const double x = a.normal();
  REQUIRE(b.normal(2.0, 3.0) == Catch::Approx(2.0 + 3.0 * x).epsilon(1e-14));
}

TEST_CASE("gamma draws match the shape-rate moments", "[rng]") {
  RngStream r(11);
  const double shape = 25.0, rate = 25.0;
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.gamma(shape, rate);
    REQUIRE(x > 0.0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  REQUIRE(mean == Catch::Approx(1.0).margin(0.01));
  REQUIRE(var == Catch::Approx(1.0 / 25.0).margin(0.006));
  REQUIRE_THROWS_AS(r.gamma(0.0, 1.0), NumericError);
  REQUIRE_THROWS_AS(r.gamma(1.0, -1.0), NumericError);
}

TEST_CASE("small-shape gamma stays positive with correct mean", "[rng]") {
  RngStream r(13);
  const int n = 50000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.gamma(0.5, 2.0);
    REQUIRE(x > 0.0);
    s += x;
  }
  REQUIRE(s / n == Catch::Approx(0.25).margin(0.01));
}

TEST_CASE("uniform_index covers its range without bias", "[rng]") {
  RngStream r(17);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const auto k = r.uniform_index(7);
    REQUIRE(k < 7);
    ++counts[static_cast<std::size_t>(k)];
  }
  for (int c : counts) REQUIRE(std::abs(c - n / 7) < 5 * std::sqrt(n / 7.0));
}

TEST_CASE("bernoulli frequency tracks its probability", "[rng]") {
  RngStream r(19);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += r.bernoulli(0.3);
  REQUIRE(double(hits) / n == Catch::Approx(0.3).margin(0.006));
}

#include <catch2/catch_amalgamated.hpp>

#include "missfactor/data.hpp"

using namespace missfactor;

namespace {

IntensityMatrix toy_matrix(const std::vector<int>& missing_per_row, int n) {
  const int p = static_cast<int>(missing_per_row.size());
  IntensityMatrix m;
  m.values = Matrix::Constant(p, n, 10.0);
  m.mask = Matrix::Ones(p, n);
  for (int g = 0; g < p; ++g) {
    for (int i = 0; i < missing_per_row[static_cast<std::size_t>(g)]; ++i) {
      m.mask(g, i) = 0.0;
      m.values(g, i) = 0.0;
    }
  }
  for (int g = 0; g < p; ++g) m.feature_ids.push_back("f" + std::to_string(g));
  for (int i = 0; i < n; ++i) m.sample_ids.push_back("s" + std::to_string(i));
  return m;
}

}  // namespace

TEST_CASE("partition splits by missing-cell count", "[data]") {
  const auto m = toy_matrix({0, 0, 1, 3, 5, 6, 10}, 10);
  const auto part = partition_features(m, 0.05, 0.5);
  // floor(0.05 * 10) = 0 observed cap, floor(0.5 * 10) = 5 drop cap
  REQUIRE(part.miss_threshold == 0);
  REQUIRE(part.drop_threshold == 5);
  REQUIRE(part.observed == std::vector<int>{0, 1});
  REQUIRE(part.missing == std::vector<int>{2, 3, 4});
  REQUIRE(part.dropped == std::vector<int>{5, 6});
  REQUIRE(part.label[0] == FeatureClass::Observed);
  REQUIRE(part.label[2] == FeatureClass::Missing);
  REQUIRE(part.label[4] == FeatureClass::Missing);
  REQUIRE(part.label[5] == FeatureClass::Dropped);
  REQUIRE(part.label[6] == FeatureClass::Dropped);
}

TEST_CASE("partition thresholds tolerate float roundoff", "[data]") {
  // 0.05 * 20 = 1 must not truncate to 0 through floating point error
  const auto m = toy_matrix({1, 2}, 20);
  const auto part = partition_features(m, 0.05, 0.5);
  REQUIRE(part.miss_threshold == 1);
  REQUIRE(part.label[0] == FeatureClass::Observed);
  REQUIRE(part.label[1] == FeatureClass::Missing);
}

TEST_CASE("fully missing features are dropped", "[data]") {
  const auto m = toy_matrix({0, 10}, 10);
  const auto part = partition_features(m, 0.05, 0.5);
  REQUIRE(part.dropped == std::vector<int>{1});
  REQUIRE(part.observed == std::vector<int>{0});
}

TEST_CASE("matrix validation rejects malformed inputs", "[data]") {
  auto m = toy_matrix({0, 1}, 6);
  REQUIRE_NOTHROW(m.validate());

  auto bad_mask = m;
  bad_mask.mask(0, 0) = 0.5;
  REQUIRE_THROWS_AS(bad_mask.validate(), InputError);

  auto bad_shape = m;
  bad_shape.mask = Matrix::Ones(2, 5);
  REQUIRE_THROWS_AS(bad_shape.validate(), InputError);

  auto bad_ids = m;
  bad_ids.feature_ids.pop_back();
  REQUIRE_THROWS_AS(bad_ids.validate(), InputError);

  auto bad_cell = m;
  bad_cell.mask(1, 0) = 0.0;  // value stays nonzero at a missing cell
  bad_cell.values(1, 0) = 3.0;
  REQUIRE_THROWS_AS(bad_cell.validate(), InputError);
}

TEST_CASE("design wraps an interest column with an intercept", "[data]") {
  Matrix x(6, 1);
  x << 1, 1, 1, 0, 0, 0;
  const auto d = make_design(x);
  REQUIRE(d.d_interest() == 1);
  REQUIRE(d.d_nuisance() == 1);
  REQUIRE(d.X_nuisance.col(0).isConstant(1.0));
  REQUIRE_NOTHROW(d.validate());
  const Matrix Z = d.combined();
  REQUIRE(Z.cols() == 2);
  REQUIRE(Z.col(0) == x.col(0));
}

TEST_CASE("design validation requires exactly one intercept", "[data]") {
  Matrix x(6, 1);
  x << 1, 2, 3, 4, 5, 6;
  DesignMatrices d;
  d.X_interest = x;
  d.X_nuisance = Matrix::Ones(6, 2);  // duplicate intercepts
  REQUIRE_THROWS_AS(d.validate(), InputError);

  DesignMatrices none;
  none.X_interest = x;
  none.X_nuisance = x;  // no intercept anywhere, and collinear
  REQUIRE_THROWS_AS(none.validate(), InputError);
}

TEST_CASE("design validation rejects rank-deficient columns", "[data]") {
  Matrix x(6, 2);
  x.col(0) << 1, 1, 1, 0, 0, 0;
  x.col(1) = 2.0 * x.col(0);
  DesignMatrices d;
  d.X_interest = x;
  d.X_nuisance = Matrix::Ones(6, 1);
  REQUIRE_THROWS_AS(d.validate(), SingularDesignError);
}

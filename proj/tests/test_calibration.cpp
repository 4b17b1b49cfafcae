#include <cmath>

#include "doctest.h"
#include "dynabs/calibration.hpp"
#include "dynabs/fixtures.hpp"

using namespace dynabs;

TEST_CASE("quantile threshold cuts exactly m distinct values") {
  std::vector<double> values = {0.9, 0.1, 0.5, 0.3, 0.7};
  // alpha = 0.4 -> m = 2: midpoint of the 2nd and 3rd order statistics.
  CHECK(quantile_threshold(values, 0.4) == doctest::Approx(0.4));
  int below = 0;
  for (double v : values)
    if (v < 0.4) ++below;
  CHECK(below == 2);
  CHECK(quantile_threshold(values, 0.0) == doctest::Approx(0.1 - 1.0));
  CHECK(quantile_threshold(values, 1.0) == doctest::Approx(0.9 + 1.0));
  CHECK_THROWS_AS(quantile_threshold({}, 0.5), Error);
  CHECK_THROWS_AS(quantile_threshold(values, 1.5), Error);
}

TEST_CASE("weighted quantile reduces to the unweighted one") {
  std::vector<double> values = {0.9, 0.1, 0.5, 0.3, 0.7};
  std::vector<double> unit(values.size(), 1.0);
  for (double alpha : {0.2, 0.4, 0.6, 0.8})
    CHECK(weighted_quantile_threshold(values, unit, alpha) ==
          doctest::Approx(quantile_threshold(values, alpha)));
}

TEST_CASE("weighted quantile splits at the mass boundary nearest the target") {
  std::vector<double> values = {0.2, 0.6};
  std::vector<double> weights = {0.3, 0.7};
  // Boundary candidates: 0 or 0.3 of the mass below. 0.3 is closer to 0.25.
  CHECK(weighted_quantile_threshold(values, weights, 0.25) == doctest::Approx(0.4));
  // 0 is closer to 0.1: threshold below everything.
  CHECK(weighted_quantile_threshold(values, weights, 0.1) < 0.2);
}

TEST_CASE("isotonic fit pools violators and averages ties") {
  // Decreasing pair pools to its mean; the tail stays put.
  IsotonicMap map = isotonic_fit({{1.0, 0.8}, {2.0, 0.2}, {3.0, 0.9}});
  REQUIRE(map.x.size() == 3);
  CHECK(map.y[0] == doctest::Approx(0.5));
  CHECK(map.y[1] == doctest::Approx(0.5));
  CHECK(map.y[2] == doctest::Approx(0.9));
  for (std::size_t i = 1; i < map.y.size(); ++i) CHECK(map.y[i] >= map.y[i - 1]);

  IsotonicMap tied = isotonic_fit({{1.0, 0.0}, {1.0, 1.0}, {2.0, 1.0}});
  REQUIRE(tied.x.size() == 2);  // equal inputs pre-pooled
  CHECK(tied.y[0] == doctest::Approx(0.5));

  // Step-function lookup with constant extrapolation.
  CHECK(map.at(0.0) == doctest::Approx(0.5));
  CHECK(map.at(2.5) == doctest::Approx(0.5));
  CHECK(map.at(99.0) == doctest::Approx(0.9));
}

TEST_CASE("weighted isotonic fit respects the weights") {
  IsotonicMap map =
      isotonic_fit_weighted({{1.0, 1.0, 3.0}, {2.0, 0.0, 1.0}});  // violation, 3:1 mass
  CHECK(map.y[0] == doctest::Approx(0.75));
  CHECK(map.y[1] == doctest::Approx(0.75));
}

TEST_CASE("fallback at the boundary level one is excluded") {
  IsotonicMap clean = isotonic_fit({{0.0, 0.3}, {1.0, 0.6}});
  FallbackEstimate fb = effective_fallback(clean, 0.5);
  CHECK(fb.value == doctest::Approx(0.3));
  CHECK(!fb.excluded);

  IsotonicMap saturated = isotonic_fit({{0.0, 1.0}, {1.0, 1.0}});
  CHECK(effective_fallback(saturated, 0.5).excluded);
}

TEST_CASE("calibrated reward interpolates and validates") {
  CHECK(calibrated_reward(0.25, 0.8, 0.4) == doctest::Approx(0.75 * 0.8 + 0.25 * 0.4));
  CHECK(calibrated_reward(0.0, 0.8, 0.4) == doctest::Approx(0.8));
  CHECK_THROWS_AS(calibrated_reward(1.5, 0.8, 0.4), Error);
}

TEST_CASE("per-sample minima demand non-empty traces") {
  RolloutTrace t;
  t.tokens = {0, 1};
  t.completion_time = 2;
  t.values = {0.7, 0.3};
  CHECK(per_sample_min_values({t}) == std::vector<double>{0.3});
  CHECK_THROWS_AS(per_sample_min_values({}), Error);
  RolloutTrace empty;
  CHECK_THROWS_AS(per_sample_min_values({empty}), Error);
}

TEST_CASE("cross-split transfer is tight on a smooth value distribution") {
  Rng gen(123);
  std::vector<double> values;
  for (int i = 0; i < 1000; ++i) values.push_back(gen.uniform());
  Rng splits(5);
  auto results = cross_split_check(values, {0.1, 0.5, 0.9}, 20, splits);
  REQUIRE(results.size() == 3);
  for (const auto& r : results) {
    CHECK(r.n_splits == 20);
    CHECK(r.mae_splits < 0.05);
    CHECK(r.abs_bias < 0.03);
    CHECK(std::abs(r.mean_achieved - r.alpha_target) == doctest::Approx(r.abs_bias));
  }
}

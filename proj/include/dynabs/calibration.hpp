#pragma once

#include <tuple>
#include <utility>

#include "dynabs/abstention.hpp"

namespace dynabs {

// Minimum per-position estimate of each trace. Errors on an empty trace set
// or an empty trace.
std::vector<double> per_sample_min_values(const std::vector<RolloutTrace>& traces);

// Rate-targeting threshold: with values sorted ascending and m = round(alpha
// * N), the midpoint of the m-th and (m+1)-th order statistics; m = 0 gives
// min - 1, m = N gives max + 1. Exactly m values fall strictly below the
// threshold when values are distinct.
double quantile_threshold(std::vector<double> values, double alpha);

// Weight-space analog used by exact-distribution evaluation: split at the
// cumulative-mass boundary closest to alpha (ties toward more mass), midpoint
// of the unique values astride the boundary. Reduces to quantile_threshold
// for unit weights and distinct values.
double weighted_quantile_threshold(const std::vector<double>& values,
                                   const std::vector<double>& weights, double alpha);

// Non-decreasing least-squares fit (pool-adjacent-violators). Equal inputs
// are pre-pooled with label averaging; lookup is a step function with
// constant extrapolation outside the observed range.
struct IsotonicMap {
  std::vector<double> x;  // unique sorted inputs
  std::vector<double> y;  // non-decreasing fitted levels
  double at(double v) const;
};

IsotonicMap isotonic_fit(const std::vector<std::pair<double, double>>& pairs);
IsotonicMap isotonic_fit_weighted(
    const std::vector<std::tuple<double, double, double>>& value_label_weight);

// Calibrated fallback: the monotone map evaluated at the operating threshold.
// A value of exactly 1 is flagged as a boundary artifact to be excluded from
// comparisons.
struct FallbackEstimate {
  double value = 0.0;
  bool excluded = false;
};
FallbackEstimate effective_fallback(const IsotonicMap& map, double threshold);

// (1 - alpha) * selective + alpha * fallback, with range validation.
double calibrated_reward(double alpha, double selective, double fallback);

// Threshold transfer: random half/half splits, calibrate on one half, measure
// the achieved rate on the other. mae_splits averages |achieved - target|
// per split; abs_bias is |mean(achieved) - target| of the split-averaged
// curve.
struct SplitTransferResult {
  double alpha_target = 0.0;
  double mean_achieved = 0.0;
  double mae_splits = 0.0;
  double abs_bias = 0.0;
  int32_t n_splits = 0;
};

std::vector<SplitTransferResult> cross_split_check(const std::vector<double>& min_values,
                                                   const std::vector<double>& alphas,
                                                   int32_t n_splits, Rng& rng);

}  // namespace dynabs

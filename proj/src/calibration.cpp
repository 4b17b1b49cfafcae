#include "dynabs/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dynabs {

std::vector<double> per_sample_min_values(const std::vector<RolloutTrace>& traces) {
  if (traces.empty()) throw Error("no traces");
  std::vector<double> out;
  out.reserve(traces.size());
  for (const auto& tr : traces) {
    if (tr.values.empty()) throw Error("trace without value estimates");
    out.push_back(*std::min_element(tr.values.begin(), tr.values.end()));
  }
  return out;
}

double quantile_threshold(std::vector<double> values, double alpha) {
  if (values.empty()) throw Error("quantile of an empty value set");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0,1]");
  for (double v : values)
    if (std::isnan(v)) throw Error("quantile input contains NaN");
  std::sort(values.begin(), values.end());
  auto n = static_cast<int64_t>(values.size());
  int64_t m = std::llround(alpha * static_cast<double>(n));
  if (m <= 0) return values.front() - 1.0;
  if (m >= n) return values.back() + 1.0;
  return 0.5 * (values[static_cast<std::size_t>(m - 1)] +
                values[static_cast<std::size_t>(m)]);
}

double weighted_quantile_threshold(const std::vector<double>& values,
                                   const std::vector<double>& weights, double alpha) {
  if (values.empty() || values.size() != weights.size())
    throw Error("weighted quantile needs matching non-empty values and weights");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0,1]");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  // Boundary masses sit between consecutive distinct values (plus both ends).
  std::vector<double> boundary_mass{0.0};
  std::vector<double> left_value, right_value;
  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    double w = weights[order[i]];
    if (w < 0.0) throw Error("negative weight");
    total += w;
    bool last = i + 1 == order.size();
    if (!last && values[order[i + 1]] == values[order[i]]) continue;
    boundary_mass.push_back(total);
    left_value.push_back(values[order[i]]);
    right_value.push_back(last ? values[order[i]] + 2.0 : values[order[i + 1]]);
  }
  if (total <= 0.0) throw Error("weights sum to zero");
  double target = alpha * total;
  std::size_t best = 0;
  for (std::size_t b = 1; b < boundary_mass.size(); ++b) {
    double d = std::abs(boundary_mass[b] - target);
    double dbest = std::abs(boundary_mass[best] - target);
    if (d < dbest - 1e-15 || (std::abs(d - dbest) <= 1e-15 && boundary_mass[b] > boundary_mass[best]))
      best = b;
  }
  if (best == 0) return values[order.front()] - 1.0;
  if (best == boundary_mass.size() - 1) return values[order.back()] + 1.0;
  return 0.5 * (left_value[best - 1] + right_value[best - 1]);
}

namespace {

IsotonicMap pava(std::vector<std::tuple<double, double, double>> pts) {
  if (pts.empty()) throw Error("isotonic fit needs at least one pair");
  for (const auto& [x, y, w] : pts) {
    (void)x;
    (void)y;
    if (!(w > 0.0)) throw Error("isotonic weights must be positive");
  }
  std::sort(pts.begin(), pts.end(),
            [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  // Pre-pool exact ties in x (weighted label mean).
  std::vector<double> xs, ys, ws;
  for (const auto& [x, y, w] : pts) {
    if (!xs.empty() && xs.back() == x) {
      double tw = ws.back() + w;
      ys.back() = (ys.back() * ws.back() + y * w) / tw;
      ws.back() = tw;
    } else {
      xs.push_back(x);
      ys.push_back(y);
      ws.push_back(w);
    }
  }
  // Pool adjacent violators: blocks of (mean, weight, extent).
  std::vector<double> bmean, bweight;
  std::vector<std::size_t> bcount;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    bmean.push_back(ys[i]);
    bweight.push_back(ws[i]);
    bcount.push_back(1);
    while (bmean.size() > 1 && bmean[bmean.size() - 2] > bmean.back()) {
      double tw = bweight[bweight.size() - 2] + bweight.back();
      bmean[bmean.size() - 2] =
          (bmean[bmean.size() - 2] * bweight[bweight.size() - 2] +
           bmean.back() * bweight.back()) /
          tw;
      bweight[bweight.size() - 2] = tw;
      bcount[bcount.size() - 2] += bcount.back();
      bmean.pop_back();
      bweight.pop_back();
      bcount.pop_back();
    }
  }
  IsotonicMap map;
  map.x = xs;
  map.y.reserve(xs.size());
  for (std::size_t b = 0; b < bmean.size(); ++b)
    for (std::size_t r = 0; r < bcount[b]; ++r) map.y.push_back(bmean[b]);
  return map;
}

}  // namespace

double IsotonicMap::at(double v) const {
  if (x.empty()) throw Error("empty isotonic map");
  // Level of the greatest breakpoint <= v; constant extrapolation at the ends.
  auto it = std::upper_bound(x.begin(), x.end(), v);
  if (it == x.begin()) return y.front();
  return y[static_cast<std::size_t>(it - x.begin()) - 1];
}

IsotonicMap isotonic_fit(const std::vector<std::pair<double, double>>& pairs) {
  std::vector<std::tuple<double, double, double>> pts;
  pts.reserve(pairs.size());
  for (const auto& [x, y] : pairs) pts.emplace_back(x, y, 1.0);
  return pava(std::move(pts));
}

IsotonicMap isotonic_fit_weighted(
    const std::vector<std::tuple<double, double, double>>& value_label_weight) {
  return pava(value_label_weight);
}

FallbackEstimate effective_fallback(const IsotonicMap& map, double threshold) {
  FallbackEstimate est;
  est.value = map.at(threshold);
  est.excluded = est.value >= 1.0;
  return est;
}

double calibrated_reward(double alpha, double selective, double fallback) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0,1]");
  if (!(fallback >= 0.0 && fallback <= 1.0)) throw Error("fallback must lie in [0,1]");
  if (alpha == 1.0) return fallback;
  if (std::isnan(selective)) throw Error("selective score undefined with alpha < 1");
  return (1.0 - alpha) * selective + alpha * fallback;
}

std::vector<SplitTransferResult> cross_split_check(const std::vector<double>& min_values,
                                                   const std::vector<double>& alphas,
                                                   int32_t n_splits, Rng& rng) {
  if (min_values.size() < 2) throw Error("cross-split check needs at least two values");
  if (n_splits < 1) throw Error("n_splits must be positive");
  std::vector<SplitTransferResult> out;
  out.reserve(alphas.size());
  for (double a : alphas) {
    SplitTransferResult r;
    r.alpha_target = a;
    r.n_splits = n_splits;
    out.push_back(r);
  }
  std::vector<std::size_t> idx(min_values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::size_t half = min_values.size() / 2;
  std::vector<double> a_vals, b_vals;
  for (int32_t split = 0; split < n_splits; ++split) {
    rng.shuffle(idx);
    a_vals.clear();
    b_vals.clear();
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < half ? a_vals : b_vals).push_back(min_values[idx[i]]);
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
      double threshold = quantile_threshold(a_vals, alphas[ai]);
      double below = 0.0;
      for (double v : b_vals)
        if (v < threshold) below += 1.0;
      double achieved = below / static_cast<double>(b_vals.size());
      out[ai].mean_achieved += achieved;
      out[ai].mae_splits += std::abs(achieved - alphas[ai]);
    }
  }
  for (auto& r : out) {
    r.mean_achieved /= static_cast<double>(n_splits);
    r.mae_splits /= static_cast<double>(n_splits);
    r.abs_bias = std::abs(r.mean_achieved - r.alpha_target);
  }
  return out;
}

}  // namespace dynabs

#include "dynabs/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace dynabs {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

bool bitwise_equal(double a, double b) {
  if (std::isnan(a) && std::isnan(b)) return true;
  return std::bit_cast<uint64_t>(a) == std::bit_cast<uint64_t>(b);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

// Preorder over non-terminal states reachable from `s` under base support.
void support_dfs(const SyntheticTaskMdp& mdp, const PolicyTable& base, const State& s,
                 const std::function<void(const State&)>& fn) {
  if (mdp.is_terminal(s)) return;
  fn(s);
  const auto& dist = mdp.row(base, s);
  for (TokenId y = 0; y < mdp.vocab.size; ++y) {
    if (dist[static_cast<std::size_t>(y)] <= 0.0 || y == mdp.vocab.eos_id) continue;
    support_dfs(mdp, base, s.child(y), fn);
  }
}

// Same walk carrying the path probability (rho excluded; pass it as `mass`).
void mass_dfs(const SyntheticTaskMdp& mdp, const PolicyTable& base, const State& s,
              double mass, const std::function<bool(const State&, double)>& fn) {
  if (mdp.is_terminal(s)) return;
  if (!fn(s, mass)) return;  // fn returning false prunes the subtree
  const auto& dist = mdp.row(base, s);
  for (TokenId y = 0; y < mdp.vocab.size; ++y) {
    double p = dist[static_cast<std::size_t>(y)];
    if (p <= 0.0 || y == mdp.vocab.eos_id) continue;
    mass_dfs(mdp, base, s.child(y), mass * p, fn);
  }
}

double weighted_lower_median(std::vector<std::pair<double, double>> value_weight) {
  std::sort(value_weight.begin(), value_weight.end());
  double total = 0.0;
  for (const auto& [v, w] : value_weight) total += w;
  double cum = 0.0;
  for (const auto& [v, w] : value_weight) {
    cum += w;
    if (cum >= total / 2.0) return v;
  }
  return value_weight.back().first;
}

struct EvalPools {
  std::vector<SampleOutcome> outcomes;
  std::vector<std::tuple<double, double, double>> calibration;  // (statistic, label, weight)
};

EvalPools build_pools(const std::vector<RolloutTrace>& traces,
                      const std::vector<double>& weights, SelectionMethod method,
                      int32_t k, double threshold, double r_bot) {
  EvalPools pools;
  pools.outcomes.reserve(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    double w = weights.empty() ? 1.0 : weights[i];
    SampleOutcome o = apply_threshold(traces[i], method, k, threshold, r_bot, w);
    if (method == SelectionMethod::kDynamicMin) {
      if (o.abstained) pools.calibration.emplace_back(o.crossing_value, o.counterfactual_reward, w);
    } else {
      // Position-k calibration uses every sample that survives to k, so the
      // monotone fit spans both sides of the threshold.
      if (traces[i].completion_time >= k)
        pools.calibration.emplace_back(traces[i].values[static_cast<std::size_t>(k) - 1],
                                       o.counterfactual_reward, w);
    }
    pools.outcomes.push_back(std::move(o));
  }
  return pools;
}

EvalReport one_operating_point(const std::vector<RolloutTrace>& traces,
                               const std::vector<double>& weights, SelectionMethod method,
                               int32_t k, double alpha, double threshold, double r_bot,
                               uint64_t seed) {
  EvalPools pools = build_pools(traces, weights, method, k, threshold, r_bot);
  EvalReport report = compute_metrics(pools.outcomes, r_bot);
  report.method = selection_method_name(method, k);
  report.alpha_target = alpha;
  report.threshold = threshold;
  report.seed = seed;
  if (!pools.calibration.empty()) {
    IsotonicMap map = isotonic_fit_weighted(pools.calibration);
    FallbackEstimate fb = effective_fallback(map, threshold);
    report.r_hat_bot = fb.value;
    report.r_hat_excluded = fb.excluded;
  } else {
    report.r_hat_excluded = true;
  }
  if (report.alpha_achieved == 0.0) {
    report.j_calibrated = report.selective;
  } else if (!report.r_hat_excluded && !std::isnan(report.r_hat_bot)) {
    report.j_calibrated =
        calibrated_reward(report.alpha_achieved, report.selective, report.r_hat_bot);
  }
  return report;
}

}  // namespace

std::string selection_method_name(SelectionMethod method, int32_t k) {
  if (method == SelectionMethod::kDynamicMin) return "dynamic";
  return "fixed_k" + std::to_string(k);
}

double sample_statistic(const RolloutTrace& trace, SelectionMethod method, int32_t k) {
  if (trace.values.empty() ||
      trace.values.size() != static_cast<std::size_t>(trace.completion_time))
    throw Error("trace values do not cover positions 1..c");
  if (method == SelectionMethod::kDynamicMin)
    return *std::min_element(trace.values.begin(), trace.values.end());
  if (k < 1) throw Error("fixed position must be >= 1");
  if (trace.completion_time < k) return kInf;  // finished before k: unreachable by any threshold
  return trace.values[static_cast<std::size_t>(k) - 1];
}

SampleOutcome apply_threshold(const RolloutTrace& trace, SelectionMethod method,
                              int32_t k, double threshold, double r_bot, double weight) {
  if (weight <= 0.0) throw Error("sample weight must be positive");
  if (trace.values.size() != static_cast<std::size_t>(trace.completion_time) ||
      trace.completion_time < 1)
    throw Error("trace values do not cover positions 1..c");
  SampleOutcome o;
  o.c = trace.completion_time;
  o.counterfactual_reward = trace.reward;
  o.weight = weight;
  if (method == SelectionMethod::kDynamicMin) {
    auto t = abstention_time(trace.values, threshold);
    if (t.has_value()) {
      o.abstained = true;
      o.tau = *t;
      o.crossing_value = trace.values[static_cast<std::size_t>(*t) - 1];
    } else {
      o.crossing_value = sample_statistic(trace, method, k);
    }
  } else {
    double stat = sample_statistic(trace, method, k);
    o.crossing_value = stat;
    if (stat < threshold) {
      o.abstained = true;
      o.tau = k;
    }
  }
  o.realized = o.abstained ? r_bot : trace.reward;
  return o;
}

std::vector<SampleOutcome> apply_threshold(const std::vector<RolloutTrace>& traces,
                                           SelectionMethod method, int32_t k,
                                           double threshold, double r_bot) {
  std::vector<SampleOutcome> out;
  out.reserve(traces.size());
  for (const auto& t : traces) out.push_back(apply_threshold(t, method, k, threshold, r_bot));
  return out;
}

EvalReport compute_metrics(const std::vector<SampleOutcome>& outcomes, double r_bot) {
  if (outcomes.empty()) throw Error("cannot aggregate zero outcomes");
  double total = 0.0, abstained = 0.0;
  double kept_reward = 0.0, realized = 0.0, wrong_abstained = 0.0;
  double tau_sum = 0.0, tau_over_c = 0.0;
  double tokens_full = 0.0, tokens_generated = 0.0;
  std::vector<std::pair<double, double>> taus;
  for (const auto& o : outcomes) {
    if (o.weight <= 0.0) throw Error("sample weight must be positive");
    if (o.c < 1) throw Error("outcome with empty completion");
    total += o.weight;
    realized += o.weight * o.realized;
    tokens_full += o.weight * o.c;
    if (o.abstained) {
      if (o.realized != r_bot) throw Error("abstained outcome carries a different fallback");
      if (o.tau < 1 || o.tau > o.c) throw Error("abstention position outside 1..c");
      abstained += o.weight;
      wrong_abstained += o.weight * (1.0 - o.counterfactual_reward);
      tau_sum += o.weight * o.tau;
      tau_over_c += o.weight * (static_cast<double>(o.tau) / o.c);
      taus.emplace_back(static_cast<double>(o.tau), o.weight);
      tokens_generated += o.weight * (o.tau - 1);
    } else {
      kept_reward += o.weight * o.realized;
      tokens_generated += o.weight * o.c;
    }
  }
  EvalReport r;
  r.n = total;
  r.n_abstained = abstained;
  r.alpha_achieved = abstained / total;
  r.objective = realized / total;
  if (abstained < total) r.selective = kept_reward / (total - abstained);
  if (abstained > 0.0) {
    r.precision = wrong_abstained / abstained;
    r.mean_tau = tau_sum / abstained;
    r.mean_tau_over_c = tau_over_c / abstained;
    r.median_tau = weighted_lower_median(std::move(taus));
  }
  r.token_savings_ratio = (tokens_full - tokens_generated) / tokens_full;
  return r;
}

std::vector<EvalReport> evaluate_rate_targeted(const std::vector<RolloutTrace>& traces,
                                               SelectionMethod method, int32_t k,
                                               const std::vector<double>& alphas,
                                               double r_bot, uint64_t seed) {
  std::vector<double> stats;
  stats.reserve(traces.size());
  for (const auto& t : traces) stats.push_back(sample_statistic(t, method, k));
  std::vector<EvalReport> reports;
  reports.reserve(alphas.size());
  for (double alpha : alphas) {
    double threshold = quantile_threshold(stats, alpha);
    reports.push_back(one_operating_point(traces, {}, method, k, alpha, threshold, r_bot, seed));
  }
  return reports;
}

std::vector<EvalReport> evaluate_rate_targeted_exact(
    const std::vector<RolloutTrace>& traces, const std::vector<double>& weights,
    SelectionMethod method, int32_t k, const std::vector<double>& alphas, double r_bot) {
  if (traces.size() != weights.size())
    throw Error("trace and weight counts differ");
  std::vector<double> stats;
  stats.reserve(traces.size());
  for (const auto& t : traces) stats.push_back(sample_statistic(t, method, k));
  std::vector<EvalReport> reports;
  reports.reserve(alphas.size());
  for (double alpha : alphas) {
    double threshold = weighted_quantile_threshold(stats, weights, alpha);
    reports.push_back(one_operating_point(traces, weights, method, k, alpha, threshold, r_bot, 0));
  }
  return reports;
}

void write_eval_reports_csv(const std::string& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.eval_report.v1\n";
  out << "method,alpha_target,alpha_achieved,T_alpha,r_hat_bot,S,J,precision,"
         "mean_tau,mean_tau_over_c,token_savings_ratio,seed\n";
  for (const auto& r : reports) {
    out << r.method << ',' << fmt(r.alpha_target) << ',' << fmt(r.alpha_achieved) << ','
        << fmt(r.threshold) << ',' << fmt(r.r_hat_bot) << ',' << fmt(r.selective) << ','
        << fmt(r.objective) << ',' << fmt(r.precision) << ',' << fmt(r.mean_tau) << ','
        << fmt(r.mean_tau_over_c) << ',' << fmt(r.token_savings_ratio) << ',' << r.seed
        << '\n';
  }
}

std::vector<EvalReport> read_eval_reports_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# dynabs.eval_report.v1")
    throw Error("eval report schema mismatch in " + path);
  if (!std::getline(in, line) ||
      line != "method,alpha_target,alpha_achieved,T_alpha,r_hat_bot,S,J,precision,"
              "mean_tau,mean_tau_over_c,token_savings_ratio,seed")
    throw Error("eval report header mismatch in " + path);
  std::vector<EvalReport> reports;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 12) throw Error("malformed eval report row: " + line);
    EvalReport r;
    r.method = cells[0];
    r.alpha_target = std::stod(cells[1]);
    r.alpha_achieved = std::stod(cells[2]);
    r.threshold = std::stod(cells[3]);
    r.r_hat_bot = std::stod(cells[4]);
    r.selective = std::stod(cells[5]);
    r.objective = std::stod(cells[6]);
    r.precision = std::stod(cells[7]);
    r.mean_tau = std::stod(cells[8]);
    r.mean_tau_over_c = std::stod(cells[9]);
    r.token_savings_ratio = std::stod(cells[10]);
    r.seed = static_cast<uint64_t>(std::stoull(cells[11]));
    reports.push_back(std::move(r));
  }
  return reports;
}

void TheoremReport::merge(const TheoremReport& other) {
  checks += other.checks;
  strict_cases += other.strict_cases;
  equality_cases += other.equality_cases;
  skipped += other.skipped;
  violations.insert(violations.end(), other.violations.begin(), other.violations.end());
}

TheoremReport verify_value_dominance(const SyntheticTaskMdp& mdp, double beta,
                                     double r_bot, const AbstentionRule* rule_override) {
  TheoremReport rep;
  rep.theorem = "value_dominance";
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), beta);
  TableValueSource source(base_vals);
  AbstentionRule rule = rule_override ? *rule_override : dynamic_rule(r_bot);
  EvaluatedPolicy aug{&mdp.pi, rule, &source};
  const auto aug_vals = exact_value_table(mdp, aug, beta);

  // Whether any state reachable from s (s included) sits below r_bot.
  std::map<State, bool> memo;
  std::function<bool(const State&)> crosses = [&](const State& s) -> bool {
    if (mdp.is_terminal(s)) return false;
    auto it = memo.find(s);
    if (it != memo.end()) return it->second;
    bool hit = base_vals.at(s) < r_bot;
    const auto& dist = mdp.row(mdp.pi, s);
    for (TokenId y = 0; y < mdp.vocab.size && !hit; ++y) {
      if (dist[static_cast<std::size_t>(y)] <= 0.0 || y == mdp.vocab.eos_id) continue;
      hit = crosses(s.child(y));
    }
    return memo[s] = hit;
  };

  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    support_dfs(mdp, mdp.pi, State{mdp.prompts[i], {}}, [&](const State& s) {
      double v = base_vals.at(s);
      double va = aug_vals.at(s);
      rep.checks++;
      if (va < std::max(r_bot, v) - kTheoremEps)
        rep.violations.push_back("dominance fails at " + format_state(s) + ": augmented " +
                                 fmt(va) + " < max(" + fmt(r_bot) + ", " + fmt(v) + ")");
      rep.checks++;
      if (crosses(s)) {
        if (va - v > kTheoremEps)
          rep.strict_cases++;
        else
          rep.violations.push_back("expected strict improvement at " + format_state(s) +
                                   ": augmented " + fmt(va) + " vs " + fmt(v));
      } else {
        if (std::abs(va - v) <= kTheoremEps)
          rep.equality_cases++;
        else
          rep.violations.push_back("expected equality at " + format_state(s) +
                                   ": augmented " + fmt(va) + " vs " + fmt(v));
      }
    });
  }
  return rep;
}

TheoremReport verify_objective_dominance(const SyntheticTaskMdp& mdp, double beta,
                                         double r_bot) {
  TheoremReport rep;
  rep.theorem = "objective_dominance";
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), beta);
  TableValueSource source(base_vals);
  EvaluatedPolicy aug{&mdp.pi, dynamic_rule(r_bot), &source};
  double j_base = exact_objective(mdp, plain_policy(mdp.pi), beta);
  double j_aug = exact_objective(mdp, aug, beta);

  rep.checks++;
  if (j_aug < r_bot - kTheoremEps)
    rep.violations.push_back("augmented objective " + fmt(j_aug) + " below fallback " +
                             fmt(r_bot));
  bool crossing = false;
  for (std::size_t i = 0; i < mdp.prompts.size() && !crossing; ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    support_dfs(mdp, mdp.pi, State{mdp.prompts[i], {}}, [&](const State& s) {
      if (base_vals.at(s) < r_bot) crossing = true;
    });
  }
  rep.checks++;
  if (crossing) {
    if (j_aug - j_base > kTheoremEps)
      rep.strict_cases++;
    else
      rep.violations.push_back("expected strict objective improvement: augmented " +
                               fmt(j_aug) + " vs " + fmt(j_base));
  } else {
    if (std::abs(j_aug - j_base) <= kTheoremEps)
      rep.equality_cases++;
    else
      rep.violations.push_back("expected objective equality: augmented " + fmt(j_aug) +
                               " vs " + fmt(j_base));
  }
  return rep;
}

TheoremReport verify_fixed_position_gap(const SyntheticTaskMdp& mdp, double beta,
                                        double r_bot, int32_t k) {
  if (k < 1 || k > mdp.horizon) throw Error("cutoff position out of range");
  TheoremReport rep;
  rep.theorem = "fixed_position_gap";
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), beta);
  TableValueSource source(base_vals);
  EvaluatedPolicy dyn{&mdp.pi, dynamic_rule(r_bot), &source};
  EvaluatedPolicy fix{&mdp.pi, fixed_position_rule(r_bot, k), &source};
  double j_dyn = exact_objective(mdp, dyn, beta);
  double j_fix = exact_objective(mdp, fix, beta);

  // Expected recovery surplus E[1{tau < k} (V(y_{1:k-1}) - r_bot)+]: paths
  // that crossed strictly before position k either survive to position k
  // (clipped value gap at the depth-(k-1) state) or cash out early, in which
  // case the value at position k-1 is the absorbed return of the finished
  // sequence. Dropping the early-termination half makes the bound false:
  // a crossed path that ends on a high reward before k is kept by the
  // position-k rule but abstained by the dynamic one.
  double surplus = 0.0;
  bool short_strict = false;  // crossed path ends before k on a return below r_bot
  std::function<void(const State&, double, bool, double)> walk =
      [&](const State& s, double mass, bool crossed, double log_ratio) {
        if (mdp.is_terminal(s)) return;
        if (s.depth() == k - 1) {
          if (crossed) surplus += mass * std::max(0.0, base_vals.at(s) - r_bot);
          return;
        }
        bool crossed_now = crossed || base_vals.at(s) < r_bot;
        const auto& dist = mdp.row(mdp.pi, s);
        const auto& ref = mdp.row(mdp.pi_ref, s);
        for (TokenId y = 0; y < mdp.vocab.size; ++y) {
          double p = dist[static_cast<std::size_t>(y)];
          if (p <= 0.0) continue;
          double step = std::log(p / ref[static_cast<std::size_t>(y)]);
          if (y == mdp.vocab.eos_id) {
            if (!crossed_now) continue;
            State leaf = s.child(y);
            double ret = mdp.reward_of(leaf.prompt, leaf.prefix) - beta * (log_ratio + step);
            surplus += mass * p * std::max(0.0, ret - r_bot);
            if (ret < r_bot) short_strict = true;
          } else {
            walk(s.child(y), mass * p, crossed_now, log_ratio + step);
          }
        }
      };
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    walk(State{mdp.prompts[i], {}}, mdp.rho[i], false, 0.0);
  }

  rep.checks++;
  if (j_dyn < j_fix - surplus - kTheoremEps)
    rep.violations.push_back("gap bound fails at k=" + std::to_string(k) + ": dynamic " +
                             fmt(j_dyn) + " < " + fmt(j_fix) + " - " + fmt(surplus));

  // Strictness: either some path stays at or above r_bot through position
  // k-1 and then reaches a sub-threshold non-terminal state at position k or
  // later, or some crossed path terminates before k on a return strictly
  // below r_bot (the dynamic rule rescues it, the position-k rule cannot).
  bool cond = short_strict;
  std::function<void(const State&, bool)> probe = [&](const State& s, bool clean) {
    if (cond || mdp.is_terminal(s)) return;
    if (s.depth() <= k - 1) {
      clean = clean && base_vals.at(s) >= r_bot;
    } else if (clean && base_vals.at(s) < r_bot) {
      cond = true;
      return;
    }
    const auto& dist = mdp.row(mdp.pi, s);
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      if (dist[static_cast<std::size_t>(y)] <= 0.0 || y == mdp.vocab.eos_id) continue;
      probe(s.child(y), clean);
    }
  };
  for (std::size_t i = 0; i < mdp.prompts.size() && !cond; ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    probe(State{mdp.prompts[i], {}}, true);
  }
  rep.checks++;
  double gap = j_dyn - (j_fix - surplus);
  if (cond) {
    if (gap > kTheoremEps)
      rep.strict_cases++;
    else
      rep.violations.push_back("expected strict gap at k=" + std::to_string(k) +
                               ": slack " + fmt(gap));
  } else {
    if (std::abs(gap) <= kTheoremEps)
      rep.equality_cases++;
    else
      rep.violations.push_back("expected tight gap at k=" + std::to_string(k) + ": slack " +
                               fmt(gap));
  }
  return rep;
}

TheoremReport verify_corollaries(const SyntheticTaskMdp& mdp, double beta, double r_bot,
                                 int32_t k) {
  if (k < 1 || k > mdp.horizon) throw Error("cutoff position out of range");
  TheoremReport rep;
  rep.theorem = "fixed_position_corollaries";
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), beta);
  TableValueSource source(base_vals);
  EvaluatedPolicy dyn{&mdp.pi, dynamic_rule(r_bot), &source};
  EvaluatedPolicy fix{&mdp.pi, fixed_position_rule(r_bot, k), &source};
  double j_dyn = exact_objective(mdp, dyn, beta);
  double j_fix = exact_objective(mdp, fix, beta);

  // Hypothesis 1: no crossing strictly before position k, so the surplus
  // term vanishes and dominance is unconditional.
  bool early_crossing = false;
  for (std::size_t i = 0; i < mdp.prompts.size() && !early_crossing; ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    support_dfs(mdp, mdp.pi, State{mdp.prompts[i], {}}, [&](const State& s) {
      if (s.depth() <= k - 2 && base_vals.at(s) < r_bot) early_crossing = true;
    });
  }
  if (!early_crossing) {
    rep.checks++;
    if (j_dyn < j_fix - kTheoremEps)
      rep.violations.push_back("no-early-crossing dominance fails at k=" +
                               std::to_string(k) + ": dynamic " + fmt(j_dyn) + " < fixed " +
                               fmt(j_fix));
  } else {
    rep.skipped++;
  }

  // Hypothesis 2: sub-threshold states absorb (certified no-recovery).
  if (!certify_no_recovery(mdp, mdp.pi, k, r_bot, beta).has_value()) {
    rep.checks++;
    if (j_dyn < j_fix - kTheoremEps)
      rep.violations.push_back("absorbing dominance fails at k=" + std::to_string(k) +
                               ": dynamic " + fmt(j_dyn) + " < fixed " + fmt(j_fix));
  } else {
    rep.skipped++;
  }
  return rep;
}

TheoremReport verify_optimal_abstention(const SyntheticTaskMdp& mdp, double r_bot) {
  TheoremReport rep;
  rep.theorem = "optimal_abstention";
  PolicyTable best = optimal_completion_policy(mdp);
  auto source = make_oracle_source(mdp, best, 0.0);
  EvaluatedPolicy aug{&best, dynamic_rule(r_bot), source.get()};
  double j_star = exact_objective(mdp, aug, 0.0);

  double closed_form = 0.0;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    closed_form += mdp.rho[i] * std::max(r_bot, max_completion_reward(mdp, mdp.prompts[i]));
  }
  rep.checks++;
  if (std::abs(j_star - closed_form) <= kTheoremEps)
    rep.equality_cases++;
  else
    rep.violations.push_back("optimal augmented objective " + fmt(j_star) +
                             " != prompt-wise max form " + fmt(closed_form));

  // Sanity half: the optimum is at least the base policy's augmented value.
  auto base_source = make_oracle_source(mdp, mdp.pi, 0.0);
  EvaluatedPolicy base_aug{&mdp.pi, dynamic_rule(r_bot), base_source.get()};
  double j_base_aug = exact_objective(mdp, base_aug, 0.0);
  rep.checks++;
  if (j_star < j_base_aug - kTheoremEps)
    rep.violations.push_back("optimal augmented objective " + fmt(j_star) +
                             " below the base policy's " + fmt(j_base_aug));
  return rep;
}

TheoremReport verify_binary_gap_bound(const SyntheticTaskMdp& mdp, double r_bot) {
  TheoremReport rep;
  rep.theorem = "binary_gap_bound";
  for (const auto& [key, r] : mdp.rewards) {
    if (r != 0.0 && r != 1.0) {
      rep.skipped++;
      return rep;
    }
  }
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), 0.0);
  TableValueSource source(base_vals);
  EvaluatedPolicy aug{&mdp.pi, dynamic_rule(r_bot), &source};
  double j_base = exact_objective(mdp, plain_policy(mdp.pi), 0.0);
  double j_aug = exact_objective(mdp, aug, 0.0);
  double lipschitz = lipschitz_constant(mdp, mdp.pi);

  double alpha = 0.0, alpha_root = 0.0;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    State root{mdp.prompts[i], {}};
    if (base_vals.at(root) < r_bot) alpha_root += mdp.rho[i];
    mass_dfs(mdp, mdp.pi, root, mdp.rho[i], [&](const State& s, double mass) {
      if (base_vals.at(s) < r_bot) {
        alpha += mass;
        return false;  // abstained: nothing below this state is reached
      }
      return true;
    });
  }

  rep.checks++;
  double bound = alpha_root * r_bot + (alpha - alpha_root) * lipschitz;
  if (j_aug - j_base > bound + kTheoremEps)
    rep.violations.push_back("gap " + fmt(j_aug - j_base) + " exceeds bound " + fmt(bound) +
                             " (alpha " + fmt(alpha) + ", alpha_root " + fmt(alpha_root) +
                             ", L " + fmt(lipschitz) + ")");
  return rep;
}

TheoremReport verify_oracle_equivalence(const SyntheticTaskMdp& mdp, double beta,
                                        double r_bot) {
  TheoremReport rep;
  rep.theorem = "oracle_equivalence";
  const auto base_vals = exact_value_table(mdp, plain_policy(mdp.pi), beta);
  TableValueSource source(base_vals);
  EvaluatedPolicy aug{&mdp.pi, dynamic_rule(r_bot), &source};

  double j_base_rec = exact_objective(mdp, plain_policy(mdp.pi), beta);
  double j_aug_rec = exact_objective(mdp, aug, beta);

  // Exhaustive enumeration of base trajectories, shared by the remaining two
  // forms: the plain return and the stop-on-first-crossing rewrite.
  double j_base_enum = 0.0;
  double j_aug_stop = 0.0;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    for (const auto& [traj, prob] : enumerate_trajectories(mdp, mdp.pi, mdp.prompts[i])) {
      double ret = traj.reward - beta * (traj.log_prob - traj.log_prob_ref);
      j_base_enum += mdp.rho[i] * prob * ret;
      bool crossed = false;
      State s{traj.prompt, {}};
      for (int32_t t = 0; t < traj.completion_time && !crossed; ++t) {
        if (base_vals.at(s) < r_bot) crossed = true;
        if (!crossed) s = s.child(traj.tokens[static_cast<std::size_t>(t)]);
      }
      j_aug_stop += mdp.rho[i] * prob * (crossed ? r_bot : ret);
    }
  }

  // Direct tree walk of the wrapped policy, charging the fallback where the
  // rule stops and the return at eos edges.
  double j_aug_enum = 0.0;
  std::function<void(const State&, double, double)> walk = [&](const State& s, double mass,
                                                               double log_ratio) {
    if (aug.abstains(s)) {
      j_aug_enum += mass * r_bot;
      return;
    }
    const auto& dist = mdp.row(mdp.pi, s);
    const auto& ref = mdp.row(mdp.pi_ref, s);
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      double p = dist[static_cast<std::size_t>(y)];
      if (p <= 0.0) continue;
      double step = std::log(p / ref[static_cast<std::size_t>(y)]);
      if (y == mdp.vocab.eos_id) {
        State leaf = s.child(y);
        j_aug_enum +=
            mass * p * (mdp.reward_of(leaf.prompt, leaf.prefix) - beta * (log_ratio + step));
      } else {
        walk(s.child(y), mass * p, log_ratio + step);
      }
    }
  };
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    walk(State{mdp.prompts[i], {}}, mdp.rho[i], 0.0);
  }

  auto expect_equal = [&](double a, double b, const std::string& what) {
    rep.checks++;
    if (std::abs(a - b) <= kTheoremEps)
      rep.equality_cases++;
    else
      rep.violations.push_back(what + ": " + fmt(a) + " vs " + fmt(b));
  };
  expect_equal(j_base_rec, j_base_enum, "base recursion vs enumeration");
  expect_equal(j_aug_rec, j_aug_enum, "augmented recursion vs enumeration");
  expect_equal(j_aug_rec, j_aug_stop, "augmented recursion vs stopping-rule form");
  return rep;
}

std::string theorem_reports_to_json(const std::vector<TheoremReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json item;
    item["theorem"] = r.theorem;
    item["checks"] = r.checks;
    item["strict_cases"] = r.strict_cases;
    item["equality_cases"] = r.equality_cases;
    item["skipped"] = r.skipped;
    item["ok"] = r.ok();
    item["violations"] = r.violations;
    arr.push_back(std::move(item));
  }
  return arr.dump(2);
}

void write_theorem_reports_json(const std::string& path,
                                const std::vector<TheoremReport>& reports) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << theorem_reports_to_json(reports) << '\n';
}

std::vector<ValueTransform> standard_monotone_transforms() {
  return {
      {"square", [](double v) { return v * v; }},
      {"sqrt", [](double v) { return std::sqrt(v); }},
      {"logistic5", [](double v) { return 1.0 / (1.0 + std::exp(-5.0 * v)); }},
  };
}

ValueTransform negation_transform() {
  return {"negate", [](double v) { return -v; }};
}

std::vector<MonotoneCheckCell> robustness_monotone(
    const std::vector<RolloutTrace>& traces, const std::vector<double>& alphas,
    const std::vector<ValueTransform>& transforms, SelectionMethod method, int32_t k,
    bool allow_non_monotone) {
  if (traces.empty()) throw Error("no traces");
  std::vector<double> stats;
  stats.reserve(traces.size());
  for (const auto& t : traces) stats.push_back(sample_statistic(t, method, k));

  std::vector<double> ordered = stats;
  std::sort(ordered.begin(), ordered.end());
  ordered.erase(std::unique(ordered.begin(), ordered.end()), ordered.end());

  std::vector<MonotoneCheckCell> cells;
  for (const auto& tf : transforms) {
    for (std::size_t i = 0; i + 1 < ordered.size(); ++i) {
      double lo = tf.fn(ordered[i]), hi = tf.fn(ordered[i + 1]);
      if (std::isnan(lo) || std::isnan(hi) || !(lo < hi)) {
        if (!allow_non_monotone)
          throw Error("transform " + tf.name + " is not strictly increasing on the data");
        break;
      }
    }
    std::vector<double> mapped;
    mapped.reserve(stats.size());
    for (double s : stats) mapped.push_back(tf.fn(s));

    for (double alpha : alphas) {
      double t_base = quantile_threshold(stats, alpha);
      double t_mapped = quantile_threshold(mapped, alpha);
      MonotoneCheckCell cell;
      cell.transform = tf.name;
      cell.alpha_target = alpha;
      double kept_base = 0.0, kept_mapped = 0.0;
      int64_t n_base = 0, n_mapped = 0;
      for (std::size_t i = 0; i < traces.size(); ++i) {
        bool abst_base = stats[i] < t_base;
        bool abst_mapped = mapped[i] < t_mapped;
        if (abst_base != abst_mapped) cell.selection_diff++;
        if (!abst_base) {
          kept_base += traces[i].reward;
          n_base++;
        }
        if (!abst_mapped) {
          kept_mapped += traces[i].reward;
          n_mapped++;
        }
      }
      cell.identical_selection = cell.selection_diff == 0;
      cell.selective_base = n_base ? kept_base / n_base : kNaN;
      cell.selective_transformed = n_mapped ? kept_mapped / n_mapped : kNaN;
      cell.bitwise_equal_selective =
          bitwise_equal(cell.selective_base, cell.selective_transformed);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::vector<NoiseCheckCell> robustness_noise(const std::vector<RolloutTrace>& traces,
                                             const std::vector<double>& sigma_mults,
                                             const std::vector<double>& alphas,
                                             int32_t n_reps, uint64_t seed) {
  if (traces.empty()) throw Error("no traces");
  if (n_reps < 1) throw Error("need at least one repetition");
  std::vector<double> clean_mins = per_sample_min_values(traces);
  double mean = 0.0;
  for (double v : clean_mins) mean += v;
  mean /= static_cast<double>(clean_mins.size());
  double var = 0.0;
  for (double v : clean_mins) var += (v - mean) * (v - mean);
  double scale_std =
      clean_mins.size() > 1 ? std::sqrt(var / static_cast<double>(clean_mins.size() - 1)) : 0.0;

  std::vector<NoiseCheckCell> cells(sigma_mults.size() * alphas.size());
  for (std::size_t mi = 0; mi < sigma_mults.size(); ++mi) {
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
      auto& cell = cells[mi * alphas.size() + ai];
      cell.sigma_mult = sigma_mults[mi];
      cell.alpha_target = alphas[ai];
      cell.per_rep_selective.reserve(static_cast<std::size_t>(n_reps));
    }
  }

  for (int32_t rep = 0; rep < n_reps; ++rep) {
    for (std::size_t mi = 0; mi < sigma_mults.size(); ++mi) {
      double sigma = sigma_mults[mi] * scale_std;
      std::vector<double> mins;
      mins.reserve(traces.size());
      if (sigma_mults[mi] == 0.0) {
        mins = clean_mins;  // the zero cell is the clean pipeline, bit for bit
      } else {
        Rng rng(derive_seed(seed, "noise",
                            static_cast<uint64_t>(rep) * 4096 + static_cast<uint64_t>(mi)));
        for (const auto& t : traces) {
          double m = kInf;
          for (double v : t.values) m = std::min(m, v + sigma * rng.normal());
          mins.push_back(m);
        }
      }
      for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        double threshold = quantile_threshold(mins, alphas[ai]);
        double kept = 0.0;
        int64_t n_kept = 0;
        for (std::size_t i = 0; i < traces.size(); ++i) {
          if (mins[i] < threshold) continue;
          kept += traces[i].reward;
          n_kept++;
        }
        cells[mi * alphas.size() + ai].per_rep_selective.push_back(
            n_kept ? kept / n_kept : kNaN);
      }
    }
  }

  for (auto& cell : cells) {
    std::vector<double> sorted = cell.per_rep_selective;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double v : sorted) sum += v;
    cell.mean_selective = sum / static_cast<double>(sorted.size());
    std::size_t n = sorted.size();
    cell.median_selective =
        n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  return cells;
}

void write_monotone_cells_csv(const std::string& path,
                              const std::vector<MonotoneCheckCell>& cells) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.monotone_check.v1\n";
  out << "transform,alpha_target,selective_base,selective_transformed,selection_diff,"
         "identical_selection,bitwise_equal_selective\n";
  for (const auto& c : cells) {
    out << c.transform << ',' << fmt(c.alpha_target) << ',' << fmt(c.selective_base) << ','
        << fmt(c.selective_transformed) << ',' << c.selection_diff << ','
        << (c.identical_selection ? 1 : 0) << ',' << (c.bitwise_equal_selective ? 1 : 0)
        << '\n';
  }
}

void write_noise_cells_csv(const std::string& path,
                           const std::vector<NoiseCheckCell>& cells) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.noise_check.v1\n";
  out << "sigma_mult,alpha_target,n_reps,mean_selective,median_selective\n";
  for (const auto& c : cells) {
    out << fmt(c.sigma_mult) << ',' << fmt(c.alpha_target) << ','
        << c.per_rep_selective.size() << ',' << fmt(c.mean_selective) << ','
        << fmt(c.median_selective) << '\n';
  }
}

TokenSavings token_savings(const std::vector<SampleOutcome>& a,
                           const std::vector<SampleOutcome>& b) {
  if (a.size() != b.size()) throw Error("outcome pools differ in size");
  TokenSavings result;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].c != b[i].c || a[i].weight != b[i].weight)
      throw Error("outcome pools do not cover the same traces");
    result.saved_a += a[i].weight * (a[i].abstained ? a[i].c - a[i].tau + 1 : 0);
    result.saved_b += b[i].weight * (b[i].abstained ? b[i].c - b[i].tau + 1 : 0);
  }
  if (result.saved_b > 0.0) {
    result.ratio = result.saved_a / result.saved_b;
    result.ratio_defined = true;
  }
  return result;
}

}  // namespace dynabs

#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "dynabs/evaluation.hpp"
#include "dynabs/fixtures.hpp"

using namespace dynabs;

namespace {

RolloutTrace make_trace(std::vector<double> values, double reward) {
  RolloutTrace t;
  t.completion_time = static_cast<int32_t>(values.size());
  t.tokens.assign(values.size(), 0);
  t.tokens.back() = 1;
  t.reward = reward;
  t.values = std::move(values);
  return t;
}

std::vector<RolloutTrace> staged_pool(int64_t n, uint64_t seed) {
  SyntheticTaskMdp mdp = fixtures::staged_reveal_default();
  auto source = make_oracle_source(mdp, mdp.pi, 0.0);
  Rng rng(seed);
  return collect_traces(mdp, mdp.pi, *source, n, rng);
}

}  // namespace

TEST_CASE("sample statistic: min for dynamic, position for fixed, +inf when short") {
  RolloutTrace t = make_trace({0.8, 0.2, 0.5}, 1.0);
  CHECK(sample_statistic(t, SelectionMethod::kDynamicMin, 1) == 0.2);
  CHECK(sample_statistic(t, SelectionMethod::kFixedPosition, 1) == 0.8);
  CHECK(sample_statistic(t, SelectionMethod::kFixedPosition, 3) == 0.5);
  CHECK(std::isinf(sample_statistic(t, SelectionMethod::kFixedPosition, 4)));
}

TEST_CASE("threshold application stops at the first crossing") {
  RolloutTrace t = make_trace({0.8, 0.2, 0.5}, 1.0);
  SampleOutcome dyn = apply_threshold(t, SelectionMethod::kDynamicMin, 1, 0.3, 0.6);
  CHECK(dyn.abstained);
  CHECK(dyn.tau == 2);
  CHECK(dyn.realized == 0.6);
  CHECK(dyn.counterfactual_reward == 1.0);
  CHECK(dyn.crossing_value == 0.2);
  CHECK(dyn.c == 3);

  // Tie at the threshold keeps generating.
  SampleOutcome tie = apply_threshold(t, SelectionMethod::kDynamicMin, 1, 0.2, 0.6);
  CHECK(!tie.abstained);
  CHECK(tie.realized == 1.0);

  SampleOutcome fixed = apply_threshold(t, SelectionMethod::kFixedPosition, 2, 0.3, 0.6);
  CHECK(fixed.abstained);
  CHECK(fixed.tau == 2);
}

TEST_CASE("metrics aggregate the kept and abstained pools correctly") {
  std::vector<SampleOutcome> outcomes;
  // Kept and right, kept and wrong, abstained on a wrong rollout, abstained
  // on a right one.
  outcomes.push_back({false, 0, 1.0, 1.0, 3, 0.9, 1.0});
  outcomes.push_back({false, 0, 0.0, 0.0, 2, 0.8, 1.0});
  outcomes.push_back({true, 1, 0.5, 0.0, 4, 0.1, 1.0});
  outcomes.push_back({true, 2, 0.5, 1.0, 4, 0.2, 1.0});
  EvalReport report = compute_metrics(outcomes, 0.5);
  CHECK(report.n == 4.0);
  CHECK(report.n_abstained == 2.0);
  CHECK(report.alpha_achieved == doctest::Approx(0.5));
  CHECK(report.selective == doctest::Approx(0.5));
  CHECK(report.objective == doctest::Approx((1.0 + 0.0 + 0.5 + 0.5) / 4.0));
  CHECK(report.precision == doctest::Approx(0.5));  // one of two abstentions was wrong
  CHECK(report.mean_tau == doctest::Approx(1.5));
  CHECK(report.mean_tau_over_c == doctest::Approx((1.0 / 4.0 + 2.0 / 4.0) / 2.0));
}

TEST_CASE("rate targeting hits the requested rates on smooth samples") {
  auto traces = staged_pool(4000, 11);
  std::vector<double> alphas = {0.1, 0.3, 0.5, 0.7, 0.9};
  auto reports = evaluate_rate_targeted(traces, SelectionMethod::kDynamicMin, 1, alphas,
                                        0.5, 42);
  REQUIRE(reports.size() == alphas.size());
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    CHECK(reports[i].alpha_target == alphas[i]);
    CHECK(std::abs(reports[i].alpha_achieved - alphas[i]) < 0.05);
    CHECK(reports[i].method == "dynamic");
    CHECK(reports[i].seed == 42);
  }
  // More abstention on a hard task can only help the kept set.
  CHECK(reports.back().selective > reports.front().selective);
}

TEST_CASE("exact evaluation matches large-sample evaluation") {
  SyntheticTaskMdp mdp = fixtures::staged_reveal_default();
  auto source = make_oracle_source(mdp, mdp.pi, 0.0);
  std::vector<RolloutTrace> traces;
  std::vector<double> weights;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i)
    for (auto& [trace, p] : enumerate_traces(mdp, mdp.pi, *source, mdp.prompts[i])) {
      traces.push_back(trace);
      weights.push_back(p * mdp.rho[i]);
    }
  auto exact = evaluate_rate_targeted_exact(traces, weights, SelectionMethod::kDynamicMin,
                                            1, {0.5}, 0.5);
  auto sampled = evaluate_rate_targeted(staged_pool(20000, 3), SelectionMethod::kDynamicMin,
                                        1, {0.5}, 0.5, 3);
  REQUIRE(exact.size() == 1);
  CHECK(std::abs(exact[0].selective - sampled[0].selective) < 0.03);
  CHECK(std::abs(exact[0].alpha_achieved - sampled[0].alpha_achieved) < 0.03);
}

TEST_CASE("every report satisfies the calibrated-reward identity") {
  auto traces = staged_pool(3000, 13);
  for (auto method : {SelectionMethod::kDynamicMin, SelectionMethod::kFixedPosition}) {
    auto reports = evaluate_rate_targeted(traces, method, 3,
                                          {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9},
                                          0.5, 7);
    for (const auto& r : reports) {
      if (r.alpha_achieved == 0.0) {
        CHECK(r.j_calibrated == r.selective);
      } else if (!r.r_hat_excluded && !std::isnan(r.r_hat_bot)) {
        double expect = r.alpha_achieved * r.r_hat_bot +
                        (1.0 - r.alpha_achieved) * r.selective;
        CHECK(std::abs(r.j_calibrated - expect) <= 1e-9);
      }
    }
  }
}

TEST_CASE("eval report csv round trip and schema guard") {
  auto reports = evaluate_rate_targeted(staged_pool(500, 17),
                                        SelectionMethod::kDynamicMin, 1, {0.3, 0.7},
                                        0.5, 1);
  std::string path = "eval_report_test.csv";
  write_eval_reports_csv(path, reports);
  auto back = read_eval_reports_csv(path);
  REQUIRE(back.size() == reports.size());
  auto same = [](double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || a == b;
  };
  for (std::size_t i = 0; i < reports.size(); ++i) {
    CHECK(back[i].method == reports[i].method);
    CHECK(back[i].alpha_target == reports[i].alpha_target);
    CHECK(back[i].alpha_achieved == reports[i].alpha_achieved);
    CHECK(same(back[i].threshold, reports[i].threshold));
    CHECK(same(back[i].r_hat_bot, reports[i].r_hat_bot));
    CHECK(same(back[i].selective, reports[i].selective));
    CHECK(back[i].objective == reports[i].objective);
    CHECK(same(back[i].precision, reports[i].precision));
    CHECK(same(back[i].mean_tau, reports[i].mean_tau));
    CHECK(same(back[i].mean_tau_over_c, reports[i].mean_tau_over_c));
    CHECK(same(back[i].token_savings_ratio, reports[i].token_savings_ratio));
    CHECK(back[i].seed == reports[i].seed);
  }

  std::ofstream tampered(path);
  tampered << "# dynabs.eval_report.v999\nmethod\n";
  tampered.close();
  CHECK_THROWS_AS(read_eval_reports_csv(path), Error);
  std::remove(path.c_str());
}

TEST_CASE("theorem verifiers pass on the fixtures and report strictness") {
  // The dip fixture has both flavors at r_bot = 1/2: [a] and the root sit
  // above a crossing (strict), the recovered and [b] branches never cross
  // (equality).
  TheoremReport dom = verify_value_dominance(fixtures::dip_and_recover(), 0.0, 0.5);
  CHECK(dom.ok());
  CHECK(dom.strict_cases > 0);
  CHECK(dom.equality_cases > 0);

  TheoremReport gap = verify_fixed_position_gap(fixtures::dip_and_recover(), 0.0, 0.5, 3);
  CHECK(gap.ok());

  TheoremReport merged = dom;
  merged.merge(gap);
  CHECK(merged.checks == dom.checks + gap.checks);
}

TEST_CASE("tie-stopping mutant breaks dominance and is caught") {
  SyntheticTaskMdp toy = fixtures::two_branch_toy();
  AbstentionRule mutant = dynamic_rule(0.5);
  mutant.abstain_on_ties = true;
  TheoremReport report = verify_value_dominance(toy, 0.0, 0.5, &mutant);
  CHECK(!report.ok());
}

TEST_CASE("monotone transforms leave the selection bitwise intact") {
  auto traces = staged_pool(1500, 19);
  auto transforms = standard_monotone_transforms();
  REQUIRE(transforms.size() == 3);
  auto cells = robustness_monotone(traces, {0.2, 0.5, 0.8}, transforms);
  REQUIRE(cells.size() == 9);
  for (const auto& cell : cells) {
    CHECK(cell.identical_selection);
    CHECK(cell.bitwise_equal_selective);
    CHECK(cell.selection_diff == 0);
  }
}

TEST_CASE("negation flips selections and is rejected without the escape hatch") {
  auto traces = staged_pool(1500, 23);
  CHECK_THROWS_AS(robustness_monotone(traces, {0.5}, {negation_transform()}), Error);
  auto cells = robustness_monotone(traces, {0.5}, {negation_transform()},
                                   SelectionMethod::kDynamicMin, 1, true);
  REQUIRE(cells.size() == 1);
  CHECK(!cells[0].identical_selection);
}

TEST_CASE("zero noise reproduces the clean pipeline") {
  auto traces = staged_pool(1200, 29);
  auto cells = robustness_noise(traces, {0.0, 1.0}, {0.3, 0.6}, 5, 31);
  REQUIRE(cells.size() == 4);
  auto clean = evaluate_rate_targeted(traces, SelectionMethod::kDynamicMin, 1,
                                      {0.3, 0.6}, 0.5, 0);
  for (const auto& cell : cells) {
    REQUIRE(cell.per_rep_selective.size() == 5);
    if (cell.sigma_mult != 0.0) continue;
    double want = cell.alpha_target == 0.3 ? clean[0].selective : clean[1].selective;
    for (double s : cell.per_rep_selective) CHECK(s == want);
    CHECK(cell.median_selective == want);
  }
}

TEST_CASE("token savings compare generated-token counts") {
  std::vector<SampleOutcome> a = {{true, 1, 0.5, 1.0, 5, 0.1, 1.0}};   // saves 5 - 0
  std::vector<SampleOutcome> b = {{true, 3, 0.5, 1.0, 5, 0.1, 1.0}};   // saves 5 - 2
  TokenSavings savings = token_savings(a, b);
  CHECK(savings.saved_a == doctest::Approx(5.0));
  CHECK(savings.saved_b == doctest::Approx(3.0));
  REQUIRE(savings.ratio_defined);
  CHECK(savings.ratio == doctest::Approx(5.0 / 3.0));

  std::vector<SampleOutcome> keeps = {{false, 0, 1.0, 1.0, 5, 0.9, 1.0}};
  CHECK(!token_savings(a, keeps).ratio_defined);
}

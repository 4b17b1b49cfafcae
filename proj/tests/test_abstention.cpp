#include <cmath>

#include "doctest.h"
#include "dynabs/abstention.hpp"
#include "dynabs/fixtures.hpp"

using namespace dynabs;

TEST_CASE("strip_distribution renormalizes over ordinary tokens") {
  std::vector<double> augmented = {0.2, 0.3, 0.1, 0.4};  // abstain mass at index 3
  auto stripped = strip_distribution(augmented, 3);
  REQUIRE(stripped.size() == 3);
  CHECK(stripped[0] == doctest::Approx(0.2 / 0.6));
  CHECK(stripped[1] == doctest::Approx(0.3 / 0.6));
  CHECK(stripped[2] == doctest::Approx(0.1 / 0.6));
  CHECK_THROWS_AS(strip_distribution({0.0, 0.0, 1.0}, 2), Error);
}

TEST_CASE("stripped conditional equals the base row where the rule keeps going") {
  SyntheticTaskMdp toy = fixtures::two_branch_toy();
  auto source = make_oracle_source(toy, toy.pi, 0.0);
  EvaluatedPolicy policy{&toy.pi, dynamic_rule(0.4), source.get()};
  State root{0, {}};
  CHECK(stripped_conditional(toy, policy, root) == toy.pi.at(root));
  CHECK_THROWS_AS(stripped_conditional(toy, policy, State{0, {0}}), Error);
}

TEST_CASE("abstention_time fires strictly below the threshold, first crossing") {
  CHECK(abstention_time({0.6, 0.5, 0.4}, 0.5) == 3);   // tie at position 2 continues
  CHECK(abstention_time({0.6, 0.49, 0.4}, 0.5) == 2);
  CHECK(abstention_time({0.3}, 0.5) == 1);
  CHECK(!abstention_time({0.5, 0.5}, 0.5).has_value());
  CHECK(!abstention_time({}, 0.5).has_value());
}

TEST_CASE("traces carry pre-token values for every emitted token") {
  SyntheticTaskMdp toy = fixtures::two_branch_toy();
  auto source = make_oracle_source(toy, toy.pi, 0.0);
  Rng rng(31);
  auto traces = collect_traces(toy, toy.pi, *source, 200, rng);
  REQUIRE(traces.size() == 200);
  for (const auto& t : traces) {
    REQUIRE(t.completion_time == static_cast<int32_t>(t.tokens.size()));
    REQUIRE(t.values.size() == t.tokens.size());
    CHECK(t.values[0] == doctest::Approx(0.5));  // every rollout starts at the root
    if (t.completion_time == 2) {
      CHECK(t.values[1] == doctest::Approx(0.0));  // the dead branch
      CHECK(t.reward == 0.0);
    } else {
      CHECK(t.reward == 1.0);
    }
  }
}

TEST_CASE("enumerated traces match the trajectory distribution") {
  SyntheticTaskMdp dip = fixtures::dip_and_recover();
  auto source = make_oracle_source(dip, dip.pi, 0.0);
  auto traces = enumerate_traces(dip, dip.pi, *source, 0);
  double total = 0.0, expected_reward = 0.0;
  for (const auto& [trace, p] : traces) {
    total += p;
    expected_reward += p * trace.reward;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(expected_reward == doctest::Approx(0.625));  // the root value
}

TEST_CASE("inference counterfactual continues the identical sample stream") {
  SyntheticTaskMdp dip = fixtures::dip_and_recover();
  auto source = make_oracle_source(dip, dip.pi, 0.0);
  AbstentionRule rule = dynamic_rule(0.5);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng with_rule(seed);
    InferenceOutcome outcome = run_inference(dip, dip.pi, *source, rule, 0, with_rule);
    Rng plain(seed);
    InferenceOutcome baseline =
        run_inference(dip, dip.pi, *source, AbstentionRule{}, 0, plain);
    CHECK(outcome.counterfactual_c == baseline.counterfactual_c);
    CHECK(outcome.counterfactual_reward == baseline.counterfactual_reward);
    if (outcome.abstained) {
      CHECK(outcome.realized_reward == 0.5);
      CHECK(outcome.tau >= 1);
      CHECK(outcome.response.back() == dip.vocab.abstain_id);
      CHECK(static_cast<int32_t>(outcome.value_trace.size()) == outcome.tau);
    } else {
      CHECK(outcome.realized_reward == outcome.counterfactual_reward);
      CHECK(outcome.tau == 0);
    }
  }
}

TEST_CASE("outcome jsonl round trip") {
  SyntheticTaskMdp dip = fixtures::dip_and_recover();
  auto source = make_oracle_source(dip, dip.pi, 0.0);
  AbstentionRule rule = dynamic_rule(0.5);
  Rng rng(77);
  std::vector<InferenceOutcome> outcomes;
  for (int i = 0; i < 40; ++i)
    outcomes.push_back(run_inference(dip, dip.pi, *source, rule, 0, rng));
  auto back = outcomes_from_jsonl(outcomes_to_jsonl(outcomes));
  REQUIRE(back.size() == outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    CHECK(back[i].prompt == outcomes[i].prompt);
    CHECK(back[i].abstained == outcomes[i].abstained);
    CHECK(back[i].tau == outcomes[i].tau);
    CHECK(back[i].response == outcomes[i].response);
    CHECK(back[i].realized_reward == outcomes[i].realized_reward);
    CHECK(back[i].value_trace == outcomes[i].value_trace);
    CHECK(back[i].counterfactual_c == outcomes[i].counterfactual_c);
    CHECK(back[i].counterfactual_reward == outcomes[i].counterfactual_reward);
  }
}

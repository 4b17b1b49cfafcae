#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "dynabs/fixtures.hpp"
#include "dynabs/mdp.hpp"

using namespace dynabs;

namespace {

GeneratorConfig small_config(uint64_t seed) {
  GeneratorConfig cfg;
  cfg.vocab_size = 3;
  cfg.horizon = 4;
  cfg.num_prompts = 2;
  cfg.reward_density = 0.3;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("vocabulary reserves the abstain id outside the ordinary range") {
  Vocabulary v = make_vocabulary(4);
  CHECK(v.eos_id == 3);
  CHECK(v.abstain_id == 4);
}

TEST_CASE("state children extend the prefix in order") {
  State s{1, {0, 2}};
  CHECK(s.depth() == 2);
  State c = s.child(1);
  CHECK(c.prefix == std::vector<TokenId>{0, 2, 1});
  CHECK(s.prefix.size() == 2);  // child copies
  CHECK(s < c);
}

TEST_CASE("generated MDPs validate and have normalized conditionals") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(3));
  validate(mdp);
  for (const auto& [state, probs] : mdp.pi) {
    double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(static_cast<int32_t>(probs.size()) == mdp.vocab.size);
  }
}

TEST_CASE("eos is forced at the last pre-horizon depth") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(4));
  for (const auto& [state, probs] : mdp.pi) {
    if (state.depth() != mdp.horizon - 1) continue;
    for (int32_t y = 0; y < mdp.vocab.size; ++y)
      CHECK(probs[static_cast<std::size_t>(y)] == (y == mdp.vocab.eos_id ? 1.0 : 0.0));
  }
}

TEST_CASE("generator is deterministic in the seed") {
  SyntheticTaskMdp a = build_random_mdp(small_config(5));
  SyntheticTaskMdp b = build_random_mdp(small_config(5));
  CHECK(mdp_to_json(a) == mdp_to_json(b));
  SyntheticTaskMdp c = build_random_mdp(small_config(6));
  CHECK(mdp_to_json(a) != mdp_to_json(c));
}

TEST_CASE("node budget rejects oversized instances") {
  GeneratorConfig cfg = small_config(1);
  cfg.horizon = 12;
  cfg.vocab_size = 4;
  cfg.node_budget = 1000;
  CHECK(estimate_state_count(cfg) > 1000.0);
  CHECK_THROWS_AS(build_random_mdp(cfg), Error);
}

TEST_CASE("horizon below 2 is rejected") {
  GeneratorConfig cfg = small_config(1);
  cfg.horizon = 1;
  CHECK_THROWS_WITH_AS(build_random_mdp(cfg), doctest::Contains("horizon"), Error);
}

TEST_CASE("walk_support visits each reachable non-terminal state once, root first") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(7));
  std::vector<State> seen;
  walk_support(mdp, mdp.pi, [&](const State& s) { seen.push_back(s); });
  REQUIRE(!seen.empty());
  CHECK(seen.front().depth() == 0);
  std::set<State> unique(seen.begin(), seen.end());
  CHECK(unique.size() == seen.size());
  for (const State& s : seen) CHECK(!mdp.is_terminal(s));
  CHECK(seen == reachable_nonterminal_states(mdp, mdp.pi));
}

TEST_CASE("enumerated trajectory probabilities sum to one per prompt") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(8));
  for (PromptId p : mdp.prompts) {
    auto all = enumerate_trajectories(mdp, mdp.pi, p);
    double total = 0.0;
    for (const auto& [traj, prob] : all) {
      total += prob;
      CHECK(traj.tokens.back() == mdp.vocab.eos_id);
      CHECK(traj.completion_time == static_cast<int32_t>(traj.tokens.size()));
      CHECK(std::exp(traj.log_prob) == doctest::Approx(prob).epsilon(1e-9));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("sampled trajectories land in the enumerated support") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(9));
  std::set<std::vector<TokenId>> support;
  for (PromptId p : mdp.prompts)
    for (const auto& [traj, prob] : enumerate_trajectories(mdp, mdp.pi, p))
      support.insert(traj.tokens);
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    Trajectory t = sample_trajectory(mdp, mdp.pi, rng);
    CHECK(support.count(t.tokens) == 1);
    CHECK(t.reward == mdp.reward_of(t.prompt, t.tokens));
  }
}

TEST_CASE("mdp json round trip preserves everything") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(10));
  SyntheticTaskMdp back = mdp_from_json(mdp_to_json(mdp));
  CHECK(back.vocab == mdp.vocab);
  CHECK(back.horizon == mdp.horizon);
  CHECK(back.prompts == mdp.prompts);
  CHECK(back.rho == mdp.rho);
  CHECK(back.pi == mdp.pi);
  CHECK(back.pi_ref == mdp.pi_ref);
  CHECK(back.rewards == mdp.rewards);
  CHECK(mdp_to_json(back) == mdp_to_json(mdp));
}

TEST_CASE("unversioned mdp json is refused") {
  SyntheticTaskMdp mdp = fixtures::two_branch_toy();
  std::string text = mdp_to_json(mdp);
  auto pos = text.find("\"version\"");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, "\"ver_ion\"");
  CHECK_THROWS_AS(mdp_from_json(text), Error);
}

TEST_CASE("trajectory jsonl round trip") {
  SyntheticTaskMdp mdp = build_random_mdp(small_config(11));
  Rng rng(3);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 25; ++i) trajs.push_back(sample_trajectory(mdp, mdp.pi, rng));
  std::vector<Trajectory> back = trajectories_from_jsonl(trajectories_to_jsonl(trajs));
  REQUIRE(back.size() == trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    CHECK(back[i].prompt == trajs[i].prompt);
    CHECK(back[i].tokens == trajs[i].tokens);
    CHECK(back[i].completion_time == trajs[i].completion_time);
    CHECK(back[i].reward == trajs[i].reward);
    CHECK(back[i].log_prob == trajs[i].log_prob);
    CHECK(back[i].log_prob_ref == trajs[i].log_prob_ref);
  }
}

TEST_CASE("fixtures validate") {
  validate(fixtures::two_branch_toy());
  validate(fixtures::dip_and_recover());
  validate(fixtures::staged_reveal_default());
}

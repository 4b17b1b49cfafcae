#pragma once

#include "dynabs/mdp.hpp"

namespace dynabs::fixtures {

// Smallest interesting task: one prompt, horizon 2, tokens {a, eos}.
// pi(eos|root) = pi(a|root) = 1/2, [a] forces eos; r([eos]) = 1,
// r([a,eos]) = 0. Hand-enumerable: V(root) = 1/2, V([a]) = 0.
SyntheticTaskMdp two_branch_toy();

// Horizon-3 task whose value dips below 1/2 at [a] (V = 1/4) and recovers to
// 1 at [a,a]. Exercises the fixed-position surplus term: with fallback 1/2,
// the position-3 rule beats the dynamic rule and the no-recovery
// certification must reject (offending path [a] -> [a,a]).
SyntheticTaskMdp dip_and_recover();

// Multi-stage task family for selective-accuracy curve checks. Each prompt
// stalls with a per-step chance of committing to a high or a low branch;
// branches leak into each other and emit eos at level-dependent rates. Entry
// timing is stochastic, so rollout minima become informative at positions
// that vary per trajectory and no single probe position sees every branch.
struct StagedFamily {
  double p_enter = 0.4;       // per-step chance of leaving the stall
  double p_enter_high = 0.2;  // branch choice on entry
  double p_eos_high = 0.5;    // eos rate inside the high branch (leaf reward 1)
  double p_eos_low = 0.5;     // eos rate inside the low branch (leaf reward 0)
  double p_fall = 0.1;        // high -> low leak
  double p_recover = 0.1;     // low -> high leak
};

struct StagedRevealConfig {
  int32_t horizon = 8;
  std::vector<StagedFamily> families;  // one prompt per family
  std::vector<double> rho;             // empty: uniform
};

SyntheticTaskMdp build_staged_reveal_mdp(const StagedRevealConfig& cfg);

// Frozen six-family instance (entry hazards, branch accuracies and eos rates
// staggered; half the families sink their low branch to the horizon, half
// cash it out early) with base accuracy close to 0.2; used by the
// curve-shape checks.
SyntheticTaskMdp staged_reveal_default();

}  // namespace dynabs::fixtures

#include "dynabs/fixtures.hpp"

#include <cmath>

namespace dynabs::fixtures {

SyntheticTaskMdp two_branch_toy() {
  SyntheticTaskMdp mdp;
  mdp.vocab = make_vocabulary(2);  // a = 0, eos = 1
  mdp.horizon = 2;
  mdp.prompts = {0};
  mdp.rho = {1.0};
  mdp.pi[State{0, {}}] = {0.5, 0.5};
  mdp.pi[State{0, {0}}] = {0.0, 1.0};
  mdp.pi_ref = mdp.pi;
  mdp.rewards[State{0, {1}}] = 1.0;  // [eos]; [a, eos] scores 0
  validate(mdp);
  return mdp;
}

SyntheticTaskMdp dip_and_recover() {
  SyntheticTaskMdp mdp;
  mdp.vocab = make_vocabulary(3);  // a = 0, b = 1, eos = 2
  mdp.horizon = 3;
  mdp.prompts = {0};
  mdp.rho = {1.0};
  mdp.pi[State{0, {}}] = {0.5, 0.5, 0.0};
  mdp.pi[State{0, {0}}] = {0.25, 0.75, 0.0};  // the dip: V = 1/4
  mdp.pi[State{0, {1}}] = {0.0, 0.0, 1.0};
  mdp.pi[State{0, {0, 0}}] = {0.0, 0.0, 1.0};  // recovery: V = 1
  mdp.pi[State{0, {0, 1}}] = {0.0, 0.0, 1.0};
  mdp.pi_ref = mdp.pi;
  mdp.rewards[State{0, {0, 0, 2}}] = 1.0;
  mdp.rewards[State{0, {1, 2}}] = 1.0;
  validate(mdp);
  return mdp;
}

namespace {

// Token 0 keeps the current phase (stall / stay on branch), token 1 advances
// it (commit to entering / pick the low branch / toggle the branch), token 2
// is eos. The phase is a pure function of the token history.
enum class Phase { kStall, kChoose, kHigh, kLow };

Phase phase_of(const std::vector<TokenId>& prefix) {
  Phase ph = Phase::kStall;
  for (TokenId tok : prefix) {
    switch (ph) {
      case Phase::kStall:
        if (tok == 1) ph = Phase::kChoose;
        break;
      case Phase::kChoose:
        ph = tok == 0 ? Phase::kHigh : Phase::kLow;
        break;
      case Phase::kHigh:
        if (tok == 1) ph = Phase::kLow;
        break;
      case Phase::kLow:
        if (tok == 1) ph = Phase::kHigh;
        break;
    }
  }
  return ph;
}

}  // namespace

SyntheticTaskMdp build_staged_reveal_mdp(const StagedRevealConfig& cfg) {
  if (cfg.families.empty()) throw Error("staged reveal config needs at least one family");
  if (cfg.horizon < 4) throw Error("staged reveal horizon must be at least 4");
  SyntheticTaskMdp mdp;
  mdp.vocab = make_vocabulary(3);
  mdp.horizon = cfg.horizon;
  for (std::size_t i = 0; i < cfg.families.size(); ++i)
    mdp.prompts.push_back(static_cast<PromptId>(i));
  mdp.rho = cfg.rho.empty()
                ? std::vector<double>(cfg.families.size(), 1.0 / cfg.families.size())
                : cfg.rho;
  if (mdp.rho.size() != mdp.prompts.size())
    throw Error("staged reveal rho must match family count");

  for (std::size_t fi = 0; fi < cfg.families.size(); ++fi) {
    const StagedFamily& fam = cfg.families[fi];
    if (fam.p_enter <= 0.0 || fam.p_enter > 1.0)
      throw Error("entry hazard must lie in (0, 1]");
    if (fam.p_eos_high + fam.p_fall > 1.0 || fam.p_eos_low + fam.p_recover > 1.0)
      throw Error("staged reveal rates exceed 1");
    PromptId p = static_cast<PromptId>(fi);
    std::function<void(const std::vector<TokenId>&)> grow =
        [&](const std::vector<TokenId>& prefix) {
          State s{p, prefix};
          int32_t depth = static_cast<int32_t>(prefix.size());
          Phase ph = phase_of(prefix);
          std::vector<double> row(3, 0.0);
          if (depth == cfg.horizon - 1) {
            row[2] = 1.0;
          } else if (ph == Phase::kStall) {
            row[0] = 1.0 - fam.p_enter;
            row[1] = fam.p_enter;
          } else if (ph == Phase::kChoose) {
            row[0] = fam.p_enter_high;
            row[1] = 1.0 - fam.p_enter_high;
          } else {
            double pe = (ph == Phase::kHigh) ? fam.p_eos_high : fam.p_eos_low;
            double leak = (ph == Phase::kHigh) ? fam.p_fall : fam.p_recover;
            row[0] = 1.0 - pe - leak;
            row[1] = leak;
            row[2] = pe;
          }
          mdp.pi[s] = row;
          for (TokenId y = 0; y < 3; ++y) {
            if (mdp.pi[s][static_cast<std::size_t>(y)] <= 0.0) continue;
            std::vector<TokenId> next = prefix;
            next.push_back(y);
            if (y == 2) {
              if (ph == Phase::kHigh) mdp.rewards[State{p, next}] = 1.0;
            } else {
              grow(next);
            }
          }
        };
    grow({});
  }
  mdp.pi_ref = mdp.pi;
  validate(mdp);
  return mdp;
}

SyntheticTaskMdp staged_reveal_default() {
  StagedRevealConfig cfg;
  cfg.horizon = 8;
  // {p_enter, p_enter_high, p_eos_high, p_eos_low, p_fall, p_recover}.
  // Accuracies are compressed across families (prompt-level ranking alone
  // buys little), fall rates are staggered (early-position probes keep highs
  // that later collapse) and low branches cash out quickly (mass that
  // finishes early escapes late-position probes). Base accuracy 0.2119.
  cfg.families = {
      {0.60, 0.240, 0.50, 0.52, 0.05, 0.06},
      {0.45, 0.232, 0.38, 0.65, 0.12, 0.05},
      {0.45, 0.216, 0.45, 0.50, 0.08, 0.07},
      {0.55, 0.208, 0.33, 0.58, 0.15, 0.04},
      {0.45, 0.192, 0.48, 0.50, 0.04, 0.06},
      {0.50, 0.184, 0.35, 0.62, 0.10, 0.05},
      {0.46, 0.176, 0.42, 0.50, 0.14, 0.08},
      {0.60, 0.168, 0.30, 0.56, 0.06, 0.04},
      {0.45, 0.160, 0.46, 0.52, 0.11, 0.07},
      {0.52, 0.152, 0.32, 0.64, 0.16, 0.03},
      {0.45, 0.144, 0.44, 0.53, 0.07, 0.08},
      {0.48, 0.144, 0.36, 0.60, 0.09, 0.05},
  };
  return build_staged_reveal_mdp(cfg);
}

}  // namespace dynabs::fixtures

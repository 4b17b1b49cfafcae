#pragma once

#include <map>
#include <memory>
#include <optional>

#include "dynabs/mdp.hpp"

namespace dynabs {

enum class AbstainMode { kNone, kDynamic, kFixed };

// Source of per-state value estimates consulted by abstention rules.
class ValueSource {
 public:
  virtual ~ValueSource() = default;
  virtual double value(const State& s) const = 0;
};

class TableValueSource final : public ValueSource {
 public:
  explicit TableValueSource(std::map<State, double> table) : table_(std::move(table)) {}
  double value(const State& s) const override {
    auto it = table_.find(s);
    if (it == table_.end())
      throw Error("value table has no entry for state " + format_state(s));
    return it->second;
  }
  const std::map<State, double>& table() const { return table_; }

 private:
  std::map<State, double> table_;
};

struct AbstentionRule {
  AbstainMode mode = AbstainMode::kNone;
  double value_threshold = 0.0;
  double fallback_reward = 0.0;
  int32_t position = 1;          // k (1-based): kFixed tests the state at depth k-1
  bool abstain_on_ties = false;  // mutated tie rule, used as a negative control

  bool abstains(const State& s, const ValueSource& values) const {
    if (mode == AbstainMode::kNone) return false;
    if (mode == AbstainMode::kFixed && s.depth() != position - 1) return false;
    double v = values.value(s);
    return abstain_on_ties ? v <= value_threshold : v < value_threshold;
  }
};

// Exact rules: threshold and fallback are the same number.
inline AbstentionRule dynamic_rule(double r_bot) {
  return AbstentionRule{AbstainMode::kDynamic, r_bot, r_bot, 1, false};
}
inline AbstentionRule fixed_position_rule(double r_bot, int32_t k) {
  return AbstentionRule{AbstainMode::kFixed, r_bot, r_bot, k, false};
}

// Policy under evaluation: base conditionals plus an optional abstention
// wrapper consulting `values`.
struct EvaluatedPolicy {
  const PolicyTable* base = nullptr;
  AbstentionRule rule;
  const ValueSource* values = nullptr;

  bool abstains(const State& s) const {
    if (rule.mode == AbstainMode::kNone) return false;
    if (values == nullptr) throw Error("abstention rule configured without a value source");
    return rule.abstains(s, *values);
  }
};

inline EvaluatedPolicy plain_policy(const PolicyTable& base) {
  return EvaluatedPolicy{&base, AbstentionRule{}, nullptr};
}

// log pi(prefix | x) / pi_ref(prefix | x) accumulated along the path to
// `state` under the given base conditionals. Throws if the path leaves the
// base or reference support.
double prefix_log_ratio(const SyntheticTaskMdp& mdp, const PolicyTable& base,
                        const State& state);

// Reward earned when `token` is appended at `state`: eos pays the terminal
// reward minus beta times the full-sequence log-ratio, the abstain token pays
// the rule's fallback, ordinary tokens pay 0.
double token_reward(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                    double beta, const State& state, TokenId token);

// Expected remaining reward from `state` (0 at terminal states), by memoized
// backward recursion over the support tree.
double exact_value(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                   double beta, const State& state);

// Values at every non-terminal state reachable under the *base* support;
// branches the wrapper would prune are still evaluated so dominance can be
// checked everywhere.
std::map<State, double> exact_value_table(const SyntheticTaskMdp& mdp,
                                          const EvaluatedPolicy& policy, double beta);

// rho-weighted root value.
double exact_objective(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                       double beta);

// Convenience: exact base-policy value table wrapped as a rule input.
std::unique_ptr<TableValueSource> make_oracle_source(const SyntheticTaskMdp& mdp,
                                                     const PolicyTable& base, double beta);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int64_t n = 0;
};

// Monte Carlo objective estimate; abstention (checked before each token, root
// included) pays the rule's fallback reward.
McEstimate mc_objective(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                        double beta, int64_t n, Rng& rng);

// Largest one-step value change over the base support (beta = 0); transitions
// into terminal states count with terminal value 0.
double lipschitz_constant(const SyntheticTaskMdp& mdp, const PolicyTable& base);

// Point-mass policy following the max-reward completion from every state it
// can reach (beta = 0 optimum over non-abstaining policies). Argmax ties break
// to the smallest token id; only eos is considered at depth T-1.
PolicyTable optimal_completion_policy(const SyntheticTaskMdp& mdp);

// Best terminal reward reachable from the root of each prompt, by direct
// enumeration of the reward table (sequences missing from it score 0).
double max_completion_reward(const SyntheticTaskMdp& mdp, PromptId prompt);

// No-recovery certificate for cutoff position k: once a base-reachable state
// at depth <= k-2 falls below r_bot, (a) every non-terminal depth-(k-1)
// descendant stays below r_bot and (b) every completion it can cash out
// before position k pays at most r_bot. Both halves are needed: a crossed
// path can recover either by climbing back or by terminating early on a good
// reward, and either one re-opens a gap over the position-k rule. Returns a
// description of the first offending path, or nullopt when certified.
// Vacuous for k = 1.
std::optional<std::string> certify_no_recovery(const SyntheticTaskMdp& mdp,
                                               const PolicyTable& base, int32_t k,
                                               double r_bot, double beta = 0.0);

// Random task whose sub-threshold states absorb: rewards under any state at
// depth <= k-2 with value below r_bot are zeroed (to a fixpoint, since
// zeroing lowers ancestor values), then the result is certified post-hoc.
SyntheticTaskMdp build_absorbing_mdp(const GeneratorConfig& cfg, int32_t k, double r_bot);

// Value-table CSV round-trip (schema dynabs.value_table.v1).
void write_value_table_csv(const std::string& path, const std::map<State, double>& table);
std::map<State, double> read_value_table_csv(const std::string& path);

}  // namespace dynabs

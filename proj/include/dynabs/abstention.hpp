#pragma once

#include <optional>

#include "dynabs/value.hpp"

namespace dynabs {

// Conditional over ordinary tokens after deleting the abstain action and
// renormalizing. `augmented` holds the abstain mass at `abstain_index`.
// Undefined (throws) when the abstain mass is 1.
std::vector<double> strip_distribution(const std::vector<double>& augmented,
                                       std::size_t abstain_index);

// Stripped conditional of a rule-wrapped policy at a state: equals the base
// conditional wherever the rule keeps generating, undefined where it abstains.
std::vector<double> stripped_conditional(const SyntheticTaskMdp& mdp,
                                         const EvaluatedPolicy& policy, const State& s);

// First 1-based position whose pre-token estimate falls below the threshold.
std::optional<int32_t> abstention_time(const std::vector<double>& value_trace,
                                       double threshold);

// One full base-policy rollout annotated with per-position value estimates
// (positions 0..c-1, the state before each sampled token).
struct RolloutTrace {
  PromptId prompt = 0;
  std::vector<TokenId> tokens;  // eos-terminated
  int32_t completion_time = 0;
  double reward = 0.0;
  std::vector<double> values;
};

std::vector<RolloutTrace> collect_traces(const SyntheticTaskMdp& mdp,
                                         const PolicyTable& base, const ValueSource& values,
                                         int64_t n, Rng& rng);

// Every support trajectory of one prompt as an annotated trace with its
// probability.
std::vector<std::pair<RolloutTrace, double>> enumerate_traces(
    const SyntheticTaskMdp& mdp, const PolicyTable& base, const ValueSource& values,
    PromptId prompt);

struct InferenceOutcome {
  PromptId prompt = 0;
  bool abstained = false;
  int32_t tau = 0;               // 1-based abstention position, 0 when kept
  std::vector<TokenId> response; // tokens emitted; ends with abstain marker when abstained
  double realized_reward = 0.0;  // fallback when abstained, terminal reward otherwise
  std::vector<double> value_trace;  // estimates at positions 0..(tau-1 or c-1)
  int32_t counterfactual_c = 0;     // completion time of the uninterrupted rollout
  double counterfactual_reward = 0.0;
};

// Generation loop with in-loop abstention: estimate the current state's
// value, test the rule, then sample. On abstention the same rng stream keeps
// sampling under the base policy, so the counterfactual completion matches
// the rollout this stream would have produced without the rule.
InferenceOutcome run_inference(const SyntheticTaskMdp& mdp, const PolicyTable& base,
                               const ValueSource& values, const AbstentionRule& rule,
                               PromptId prompt, Rng& rng);

std::string outcomes_to_jsonl(const std::vector<InferenceOutcome>& outcomes);
std::vector<InferenceOutcome> outcomes_from_jsonl(const std::string& text);

}  // namespace dynabs

#include "dynabs/abstention.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace dynabs {

std::vector<double> strip_distribution(const std::vector<double>& augmented,
                                       std::size_t abstain_index) {
  if (abstain_index >= augmented.size())
    throw Error("abstain index out of range");
  double mass = 0.0;
  for (double p : augmented) {
    if (p < 0.0) throw Error("augmented distribution has a negative entry");
    mass += p;
  }
  if (std::abs(mass - 1.0) > kProbEps)
    throw Error("augmented distribution does not sum to 1");
  double keep = 1.0 - augmented[abstain_index];
  if (keep <= kProbEps)
    throw Error("stripped conditional undefined: abstain mass is 1");
  std::vector<double> out;
  out.reserve(augmented.size() - 1);
  for (std::size_t i = 0; i < augmented.size(); ++i)
    if (i != abstain_index) out.push_back(augmented[i] / keep);
  return out;
}

std::vector<double> stripped_conditional(const SyntheticTaskMdp& mdp,
                                         const EvaluatedPolicy& policy, const State& s) {
  if (mdp.is_terminal(s))
    throw Error("stripped conditional queried at terminal state " + format_state(s));
  if (policy.abstains(s))
    throw Error("stripped conditional undefined: rule abstains at " + format_state(s));
  return mdp.row(*policy.base, s);
}

std::optional<int32_t> abstention_time(const std::vector<double>& value_trace,
                                       double threshold) {
  for (std::size_t i = 0; i < value_trace.size(); ++i)
    if (value_trace[i] < threshold) return static_cast<int32_t>(i) + 1;
  return std::nullopt;
}

std::vector<RolloutTrace> collect_traces(const SyntheticTaskMdp& mdp,
                                         const PolicyTable& base, const ValueSource& values,
                                         int64_t n, Rng& rng) {
  std::vector<RolloutTrace> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    std::size_t pidx = rng.categorical(mdp.rho);
    RolloutTrace tr;
    tr.prompt = mdp.prompts[pidx];
    State s{tr.prompt, {}};
    while (!mdp.is_terminal(s)) {
      tr.values.push_back(values.value(s));
      const auto& dist = mdp.row(base, s);
      TokenId y = static_cast<TokenId>(rng.categorical(dist));
      tr.tokens.push_back(y);
      s = s.child(y);
    }
    tr.completion_time = static_cast<int32_t>(tr.tokens.size());
    tr.reward = mdp.reward_of(tr.prompt, tr.tokens);
    out.push_back(std::move(tr));
  }
  return out;
}

std::vector<std::pair<RolloutTrace, double>> enumerate_traces(
    const SyntheticTaskMdp& mdp, const PolicyTable& base, const ValueSource& values,
    PromptId prompt) {
  auto trajs = enumerate_trajectories(mdp, base, prompt);
  std::vector<std::pair<RolloutTrace, double>> out;
  out.reserve(trajs.size());
  for (auto& [traj, prob] : trajs) {
    RolloutTrace tr;
    tr.prompt = traj.prompt;
    tr.tokens = traj.tokens;
    tr.completion_time = traj.completion_time;
    tr.reward = traj.reward;
    State s{tr.prompt, {}};
    for (TokenId y : tr.tokens) {
      tr.values.push_back(values.value(s));
      s = s.child(y);
    }
    out.emplace_back(std::move(tr), prob);
  }
  return out;
}

InferenceOutcome run_inference(const SyntheticTaskMdp& mdp, const PolicyTable& base,
                               const ValueSource& values, const AbstentionRule& rule,
                               PromptId prompt, Rng& rng) {
  InferenceOutcome out;
  out.prompt = prompt;
  State s{prompt, {}};
  std::vector<TokenId> full;
  while (!mdp.is_terminal(s)) {
    if (!out.abstained) {
      out.value_trace.push_back(values.value(s));
      if (rule.mode != AbstainMode::kNone && rule.abstains(s, values)) {
        out.abstained = true;
        out.tau = s.depth() + 1;
      }
    }
    const auto& dist = mdp.row(base, s);
    TokenId y = static_cast<TokenId>(rng.categorical(dist));
    full.push_back(y);
    s = s.child(y);
  }
  out.counterfactual_c = static_cast<int32_t>(full.size());
  out.counterfactual_reward = mdp.reward_of(prompt, full);
  if (out.abstained) {
    out.response.assign(full.begin(), full.begin() + (out.tau - 1));
    out.response.push_back(mdp.vocab.abstain_id);
    out.realized_reward = rule.fallback_reward;
  } else {
    out.response = full;
    out.realized_reward = out.counterfactual_reward;
  }
  return out;
}

std::string outcomes_to_jsonl(const std::vector<InferenceOutcome>& outcomes) {
  std::ostringstream os;
  for (const auto& o : outcomes) {
    nlohmann::json j{{"prompt", o.prompt},
                     {"abstained", o.abstained},
                     {"tau", o.tau},
                     {"response", o.response},
                     {"realized_reward", o.realized_reward},
                     {"value_trace", o.value_trace},
                     {"counterfactual_c", o.counterfactual_c},
                     {"counterfactual_reward", o.counterfactual_reward}};
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<InferenceOutcome> outcomes_from_jsonl(const std::string& text) {
  std::vector<InferenceOutcome> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    InferenceOutcome o;
    o.prompt = j.at("prompt").get<PromptId>();
    o.abstained = j.at("abstained").get<bool>();
    o.tau = j.at("tau").get<int32_t>();
    o.response = j.at("response").get<std::vector<TokenId>>();
    o.realized_reward = j.at("realized_reward").get<double>();
    o.value_trace = j.at("value_trace").get<std::vector<double>>();
    o.counterfactual_c = j.at("counterfactual_c").get<int32_t>();
    o.counterfactual_reward = j.at("counterfactual_reward").get<double>();
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace dynabs

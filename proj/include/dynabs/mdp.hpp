#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynabs/rng.hpp"

namespace dynabs {

using TokenId = int32_t;
using PromptId = int32_t;

// Comparison slack for probability/value sanity checks. Theorem checks use
// their own tolerance (kTheoremEps).
inline constexpr double kProbEps = 1e-9;
inline constexpr double kTheoremEps = 1e-9;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Vocabulary {
  int32_t size = 0;        // ordinary tokens are ids 0..size-1 (eos included)
  TokenId eos_id = 0;      // must lie inside the ordinary range
  TokenId abstain_id = 0;  // reserved id outside the ordinary range

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

inline Vocabulary make_vocabulary(int32_t size) {
  return Vocabulary{size, size - 1, size};
}

// A state is a prompt plus the generated prefix. Terminal iff the prefix
// contains eos or has reached the horizon.
struct State {
  PromptId prompt = 0;
  std::vector<TokenId> prefix;

  int32_t depth() const { return static_cast<int32_t>(prefix.size()); }
  State child(TokenId y) const {
    State s{prompt, prefix};
    s.prefix.push_back(y);
    return s;
  }
  auto operator<=>(const State&) const = default;
};

std::string format_state(const State& s);

// Next-token conditionals over ordinary tokens, keyed by non-terminal state.
using PolicyTable = std::map<State, std::vector<double>>;

// An eos-terminated generation. completion_time (c) is the 1-based index of
// the terminal token and equals tokens.size().
struct Trajectory {
  PromptId prompt = 0;
  std::vector<TokenId> tokens;
  int32_t completion_time = 0;
  double reward = 0.0;
  double log_prob = 0.0;      // under the generating policy
  double log_prob_ref = 0.0;  // under pi_ref
};

struct SyntheticTaskMdp {
  Vocabulary vocab;
  int32_t horizon = 0;  // max sequence length T, eos forced at depth T-1
  std::vector<PromptId> prompts;
  std::vector<double> rho;  // prompt distribution, aligned with prompts
  PolicyTable pi;
  PolicyTable pi_ref;
  // Terminal reward per complete sequence, keyed by (prompt, tokens incl eos).
  // Sequences absent from the map score 0.
  std::map<State, double> rewards;

  bool is_terminal(const State& s) const;
  double rho_of(PromptId p) const;
  double reward_of(PromptId p, const std::vector<TokenId>& seq) const;
  const std::vector<double>& row(const PolicyTable& table, const State& s) const;
};

// Structural checks: distributions normalized, support(pi) contained in
// support(pi_ref), eos forced at depth T-1, rewards in [0,1], every reachable
// non-terminal state covered by both tables. Throws Error on violation.
void validate(const SyntheticTaskMdp& mdp);

struct GeneratorConfig {
  int32_t vocab_size = 3;
  int32_t horizon = 3;
  int32_t num_prompts = 1;
  double reward_density = 0.2;  // P(reward = 1) per leaf in binary mode
  double concentration = 1.0;   // Dirichlet concentration for conditionals
  bool independent_ref = false; // draw pi_ref independently instead of copying pi
  bool binary_rewards = true;   // false: leaf rewards Uniform[0,1]
  uint64_t seed = 0;
  int64_t node_budget = 1'000'000;
};

// Number of states carrying conditionals implied by (vocab, horizon, prompts).
double estimate_state_count(const GeneratorConfig& cfg);

SyntheticTaskMdp build_random_mdp(const GeneratorConfig& cfg);

// Visit every reachable state under `table` support, root first (preorder,
// token-ascending). fn receives non-terminal states only.
void walk_support(const SyntheticTaskMdp& mdp, const PolicyTable& table,
                  const std::function<void(const State&)>& fn);

std::vector<State> reachable_nonterminal_states(const SyntheticTaskMdp& mdp,
                                                const PolicyTable& table);

// Sample one rollout; the prompt is drawn from rho.
Trajectory sample_trajectory(const SyntheticTaskMdp& mdp, const PolicyTable& table, Rng& rng);

// Same with a caller-chosen prompt; rejects prompts with rho = 0.
Trajectory sample_trajectory(const SyntheticTaskMdp& mdp, const PolicyTable& table,
                             PromptId prompt, Rng& rng);

// All support trajectories from one prompt with their probabilities, DFS
// token order. node_budget bounds the states visited.
std::vector<std::pair<Trajectory, double>> enumerate_trajectories(
    const SyntheticTaskMdp& mdp, const PolicyTable& table, PromptId prompt,
    int64_t node_budget = 1'000'000);

// JSON round-trip (schema version 1).
std::string mdp_to_json(const SyntheticTaskMdp& mdp);
SyntheticTaskMdp mdp_from_json(const std::string& text);
void save_mdp(const SyntheticTaskMdp& mdp, const std::string& path);
SyntheticTaskMdp load_mdp(const std::string& path);

std::string trajectories_to_jsonl(const std::vector<Trajectory>& trajs);
std::vector<Trajectory> trajectories_from_jsonl(const std::string& text);

}  // namespace dynabs

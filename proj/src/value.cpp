#include "dynabs/value.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace dynabs {

namespace {

// Shared recursion for exact values. plr is the prefix log-ratio of `state`
// under the base conditionals (ignored when beta == 0).
struct ValueEvaluator {
  const SyntheticTaskMdp& mdp;
  const EvaluatedPolicy& policy;
  double beta;
  std::map<State, double> memo;

  double eval(const State& s, double plr) {
    if (mdp.is_terminal(s)) return 0.0;
    auto it = memo.find(s);
    if (it != memo.end()) return it->second;
    double v;
    if (policy.abstains(s)) {
      v = policy.rule.fallback_reward;
    } else {
      v = 0.0;
      const auto& dist = mdp.row(*policy.base, s);
      const auto& ref = mdp.row(mdp.pi_ref, s);
      for (TokenId y = 0; y < mdp.vocab.size; ++y) {
        double p = dist[static_cast<std::size_t>(y)];
        if (p <= 0.0) continue;
        if (y == mdp.vocab.eos_id) {
          State leaf = s.child(y);
          double r = mdp.reward_of(s.prompt, leaf.prefix);
          if (beta != 0.0) {
            double pref = ref[static_cast<std::size_t>(y)];
            if (pref <= 0.0)
              throw Error("undefined KL: pi_ref is zero on the support at " +
                          format_state(s) + " token " + std::to_string(y));
            r -= beta * (plr + std::log(p) - std::log(pref));
          }
          v += p * r;
        } else {
          double step = 0.0;
          if (beta != 0.0) {
            double pref = ref[static_cast<std::size_t>(y)];
            if (pref <= 0.0)
              throw Error("undefined KL: pi_ref is zero on the support at " +
                          format_state(s) + " token " + std::to_string(y));
            step = std::log(p) - std::log(pref);
          }
          v += p * eval(s.child(y), plr + step);
        }
      }
    }
    memo.emplace(s, v);
    return v;
  }
};

}  // namespace

double prefix_log_ratio(const SyntheticTaskMdp& mdp, const PolicyTable& base,
                        const State& state) {
  double plr = 0.0;
  State s{state.prompt, {}};
  for (TokenId y : state.prefix) {
    const auto& dist = mdp.row(base, s);
    const auto& ref = mdp.row(mdp.pi_ref, s);
    double p = dist[static_cast<std::size_t>(y)];
    double pref = ref[static_cast<std::size_t>(y)];
    if (p <= 0.0)
      throw Error("state lies outside the base support: " + format_state(state));
    if (pref <= 0.0)
      throw Error("undefined KL: pi_ref is zero along the path to " + format_state(state));
    plr += std::log(p) - std::log(pref);
    s = s.child(y);
  }
  return plr;
}

double token_reward(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                    double beta, const State& state, TokenId token) {
  if (mdp.is_terminal(state))
    throw Error("token_reward requires a non-terminal state, got " + format_state(state));
  if (token == mdp.vocab.abstain_id) {
    if (policy.rule.mode == AbstainMode::kNone)
      throw Error("abstain token under a policy without an abstention rule");
    return policy.rule.fallback_reward;
  }
  if (token < 0 || token >= mdp.vocab.size)
    throw Error("token id out of range: " + std::to_string(token));
  if (token != mdp.vocab.eos_id) return 0.0;
  State leaf = state.child(token);
  double r = mdp.reward_of(state.prompt, leaf.prefix);
  if (beta != 0.0) {
    double plr = prefix_log_ratio(mdp, *policy.base, state);
    const auto& dist = mdp.row(*policy.base, state);
    const auto& ref = mdp.row(mdp.pi_ref, state);
    double p = dist[static_cast<std::size_t>(token)];
    double pref = ref[static_cast<std::size_t>(token)];
    if (p <= 0.0)
      throw Error("eos outside the base support at " + format_state(state));
    if (pref <= 0.0)
      throw Error("undefined KL: pi_ref is zero on the support at " + format_state(state));
    r -= beta * (plr + std::log(p) - std::log(pref));
  }
  return r;
}

double exact_value(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                   double beta, const State& state) {
  if (mdp.is_terminal(state)) return 0.0;
  ValueEvaluator ev{mdp, policy, beta, {}};
  double plr = beta != 0.0 ? prefix_log_ratio(mdp, *policy.base, state) : 0.0;
  return ev.eval(state, plr);
}

std::map<State, double> exact_value_table(const SyntheticTaskMdp& mdp,
                                          const EvaluatedPolicy& policy, double beta) {
  ValueEvaluator ev{mdp, policy, beta, {}};
  std::map<State, double> out;
  std::function<void(const State&, double)> dfs = [&](const State& s, double plr) {
    out[s] = ev.eval(s, plr);
    const auto& dist = mdp.row(*policy.base, s);
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      double p = dist[static_cast<std::size_t>(y)];
      if (p <= 0.0 || y == mdp.vocab.eos_id) continue;
      State c = s.child(y);
      if (mdp.is_terminal(c)) continue;
      double step = 0.0;
      if (beta != 0.0) {
        const auto& ref = mdp.row(mdp.pi_ref, s);
        step = std::log(p) - std::log(ref[static_cast<std::size_t>(y)]);
      }
      dfs(c, plr + step);
    }
  };
  for (PromptId p : mdp.prompts) dfs(State{p, {}}, 0.0);
  return out;
}

double exact_objective(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                       double beta) {
  double j = 0.0;
  ValueEvaluator ev{mdp, policy, beta, {}};
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    j += mdp.rho[i] * ev.eval(State{mdp.prompts[i], {}}, 0.0);
  }
  return j;
}

std::unique_ptr<TableValueSource> make_oracle_source(const SyntheticTaskMdp& mdp,
                                                     const PolicyTable& base, double beta) {
  return std::make_unique<TableValueSource>(
      exact_value_table(mdp, plain_policy(base), beta));
}

McEstimate mc_objective(const SyntheticTaskMdp& mdp, const EvaluatedPolicy& policy,
                        double beta, int64_t n, Rng& rng) {
  if (n <= 0) throw Error("mc_objective needs a positive sample count");
  double sum = 0.0, sumsq = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    std::size_t pidx = rng.categorical(mdp.rho);
    State s{mdp.prompts[pidx], {}};
    double plr = 0.0;
    double total = 0.0;
    for (;;) {
      if (policy.abstains(s)) {
        total = policy.rule.fallback_reward;
        break;
      }
      const auto& dist = mdp.row(*policy.base, s);
      TokenId y = static_cast<TokenId>(rng.categorical(dist));
      double step = 0.0;
      if (beta != 0.0) {
        const auto& ref = mdp.row(mdp.pi_ref, s);
        double pref = ref[static_cast<std::size_t>(y)];
        if (pref <= 0.0)
          throw Error("undefined KL: pi_ref is zero on a sampled path at " +
                      format_state(s));
        step = std::log(dist[static_cast<std::size_t>(y)]) - std::log(pref);
      }
      State c = s.child(y);
      if (y == mdp.vocab.eos_id) {
        total = mdp.reward_of(s.prompt, c.prefix) - beta * (plr + step);
        break;
      }
      plr += step;
      s = std::move(c);
    }
    sum += total;
    sumsq += total * total;
  }
  McEstimate est;
  est.n = n;
  est.mean = sum / static_cast<double>(n);
  if (n > 1) {
    double var = (sumsq - sum * sum / static_cast<double>(n)) / static_cast<double>(n - 1);
    est.std_error = std::sqrt(std::max(0.0, var) / static_cast<double>(n));
  }
  return est;
}

double lipschitz_constant(const SyntheticTaskMdp& mdp, const PolicyTable& base) {
  auto table = exact_value_table(mdp, plain_policy(base), 0.0);
  double worst = 0.0;
  walk_support(mdp, base, [&](const State& s) {
    double vs = table.at(s);
    const auto& dist = mdp.row(base, s);
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      if (dist[static_cast<std::size_t>(y)] <= 0.0) continue;
      State c = s.child(y);
      double vc = mdp.is_terminal(c) ? 0.0 : table.at(c);
      worst = std::max(worst, std::abs(vs - vc));
    }
  });
  return worst;
}

namespace {

// Max terminal reward reachable from s over all policies that terminate by
// the horizon, with the achieving token.
double best_completion(const SyntheticTaskMdp& mdp, const State& s, TokenId* argmax) {
  double best = -1.0;
  TokenId best_y = mdp.vocab.eos_id;
  if (s.depth() == mdp.horizon - 1) {
    best = mdp.reward_of(s.prompt, s.child(mdp.vocab.eos_id).prefix);
  } else {
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      double r = y == mdp.vocab.eos_id
                     ? mdp.reward_of(s.prompt, s.child(y).prefix)
                     : best_completion(mdp, s.child(y), nullptr);
      if (r > best + kProbEps) {
        best = r;
        best_y = y;
      }
    }
  }
  if (argmax != nullptr) *argmax = best_y;
  return best;
}

}  // namespace

PolicyTable optimal_completion_policy(const SyntheticTaskMdp& mdp) {
  PolicyTable table;
  for (PromptId p : mdp.prompts) {
    State s{p, {}};
    while (!mdp.is_terminal(s)) {
      TokenId y = mdp.vocab.eos_id;
      best_completion(mdp, s, &y);
      std::vector<double> row(static_cast<std::size_t>(mdp.vocab.size), 0.0);
      row[static_cast<std::size_t>(y)] = 1.0;
      table[s] = row;
      s = s.child(y);
    }
  }
  return table;
}

double max_completion_reward(const SyntheticTaskMdp& mdp, PromptId prompt) {
  double best = 0.0;  // sequences missing from the table score 0
  for (const auto& [key, r] : mdp.rewards)
    if (key.prompt == prompt) best = std::max(best, r);
  return best;
}

void write_value_table_csv(const std::string& path, const std::map<State, double>& table) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.value_table.v1\n";
  out << "prompt_id,prefix,t,value\n";
  out.precision(17);
  for (const auto& [s, v] : table) {
    out << s.prompt << ',';
    for (std::size_t i = 0; i < s.prefix.size(); ++i) {
      if (i) out << ';';
      out << s.prefix[i];
    }
    out << ',' << s.depth() << ',' << v << '\n';
  }
}

std::map<State, double> read_value_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# dynabs.value_table.v1")
    throw Error("value table schema mismatch in " + path);
  if (!std::getline(in, line) || line != "prompt_id,prefix,t,value")
    throw Error("value table header mismatch in " + path);
  std::map<State, double> table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string prompt_s, prefix_s, t_s, value_s;
    if (!std::getline(row, prompt_s, ',') || !std::getline(row, prefix_s, ',') ||
        !std::getline(row, t_s, ',') || !std::getline(row, value_s))
      throw Error("malformed value table row: " + line);
    State s;
    s.prompt = static_cast<PromptId>(std::stol(prompt_s));
    if (!prefix_s.empty()) {
      std::istringstream ps(prefix_s);
      std::string tok;
      while (std::getline(ps, tok, ';'))
        s.prefix.push_back(static_cast<TokenId>(std::stol(tok)));
    }
    if (std::stol(t_s) != s.depth())
      throw Error("value table row depth mismatch: " + line);
    table[s] = std::stod(value_s);
  }
  return table;
}

namespace {

// Depth-first search over the base policy's support, stopping at terminals.
void for_each_support_state(const SyntheticTaskMdp& mdp, const PolicyTable& base,
                            const State& s,
                            const std::function<void(const State&)>& fn) {
  if (mdp.is_terminal(s)) return;
  fn(s);
  const auto& dist = base.at(s);
  for (TokenId y = 0; y < mdp.vocab.size; ++y) {
    if (dist[static_cast<std::size_t>(y)] <= 0.0) continue;
    if (y == mdp.vocab.eos_id) continue;
    for_each_support_state(mdp, base, s.child(y), fn);
  }
}

bool starts_with(const std::vector<TokenId>& seq, const std::vector<TokenId>& prefix) {
  if (prefix.size() > seq.size()) return false;
  return std::equal(prefix.begin(), prefix.end(), seq.begin());
}

}  // namespace

std::optional<std::string> certify_no_recovery(const SyntheticTaskMdp& mdp,
                                               const PolicyTable& base, int32_t k,
                                               double r_bot, double beta) {
  if (k < 1 || k > mdp.horizon) throw Error("cutoff position out of range");
  if (k == 1) return std::nullopt;
  const auto values = exact_value_table(mdp, plain_policy(base), beta);
  std::optional<std::string> witness;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    if (mdp.rho[i] <= 0.0) continue;
    for_each_support_state(mdp, base, State{mdp.prompts[i], {}}, [&](const State& s) {
      if (witness) return;
      if (s.depth() > k - 2) return;
      if (values.at(s) >= r_bot) return;
      // Sweep the crossed subtree up to position k: neither a non-terminal
      // depth-(k-1) state at or above r_bot nor an early completion paying
      // more than r_bot may be reachable.
      std::function<void(const State&)> sweep = [&](const State& d) {
        if (witness) return;
        if (d.depth() == k - 1) {
          if (values.at(d) >= r_bot)
            witness = "state " + format_state(s) + " (value " +
                      std::to_string(values.at(s)) + ") recovers at " + format_state(d) +
                      " (value " + std::to_string(values.at(d)) + ") with cutoff " +
                      std::to_string(k);
          return;
        }
        const auto& dist = mdp.row(base, d);
        for (TokenId y = 0; y < mdp.vocab.size; ++y) {
          if (dist[static_cast<std::size_t>(y)] <= 0.0) continue;
          State next = d.child(y);
          if (y == mdp.vocab.eos_id) {
            double ret = mdp.reward_of(next.prompt, next.prefix);
            if (beta != 0.0) ret -= beta * prefix_log_ratio(mdp, base, next);
            if (ret > r_bot)
              witness = "state " + format_state(s) + " (value " +
                        std::to_string(values.at(s)) + ") cashes out " +
                        std::to_string(ret) + " at " + format_state(next) +
                        " before cutoff " + std::to_string(k);
          } else {
            sweep(next);
          }
          if (witness) return;
        }
      };
      sweep(s);
    });
    if (witness) break;
  }
  return witness;
}

SyntheticTaskMdp build_absorbing_mdp(const GeneratorConfig& cfg, int32_t k, double r_bot) {
  SyntheticTaskMdp mdp = build_random_mdp(cfg);
  if (k < 1 || k > mdp.horizon) throw Error("cutoff position out of range");
  if (r_bot <= 0.0) throw Error("absorbing construction needs a positive fallback");
  for (;;) {
    const auto values = exact_value_table(mdp, plain_policy(mdp.pi), 0.0);
    std::optional<State> offender;
    for (std::size_t i = 0; i < mdp.prompts.size() && !offender; ++i) {
      if (mdp.rho[i] <= 0.0) continue;
      for_each_support_state(mdp, mdp.pi, State{mdp.prompts[i], {}}, [&](const State& s) {
        if (offender) return;
        if (s.depth() > k - 2) return;
        if (values.at(s) >= r_bot) return;
        for (const auto& [key, r] : mdp.rewards) {
          if (r != 0.0 && key.prompt == s.prompt && starts_with(key.prefix, s.prefix)) {
            offender = s;
            return;
          }
        }
      });
    }
    if (!offender) break;
    for (auto& [key, r] : mdp.rewards) {
      if (key.prompt == offender->prompt && starts_with(key.prefix, offender->prefix))
        r = 0.0;
    }
  }
  if (auto witness = certify_no_recovery(mdp, mdp.pi, k, r_bot))
    throw Error("absorbing construction failed certification: " + *witness);
  return mdp;
}

}  // namespace dynabs

#include "dynabs/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dynabs {

namespace {

using nlohmann::json;

bool contains_eos(const Vocabulary& vocab, const std::vector<TokenId>& seq,
                  std::size_t end_excl) {
  for (std::size_t i = 0; i < end_excl && i < seq.size(); ++i)
    if (seq[i] == vocab.eos_id) return true;
  return false;
}

}  // namespace

std::string format_state(const State& s) {
  std::ostringstream os;
  os << "(prompt " << s.prompt << ", prefix [";
  for (std::size_t i = 0; i < s.prefix.size(); ++i) {
    if (i) os << ' ';
    os << s.prefix[i];
  }
  os << "])";
  return os.str();
}

bool SyntheticTaskMdp::is_terminal(const State& s) const {
  if (s.depth() >= horizon) return true;
  return contains_eos(vocab, s.prefix, s.prefix.size());
}

double SyntheticTaskMdp::rho_of(PromptId p) const {
  for (std::size_t i = 0; i < prompts.size(); ++i)
    if (prompts[i] == p) return rho[i];
  throw Error("unknown prompt id " + std::to_string(p));
}

double SyntheticTaskMdp::reward_of(PromptId p, const std::vector<TokenId>& seq) const {
  auto it = rewards.find(State{p, seq});
  return it == rewards.end() ? 0.0 : it->second;
}

const std::vector<double>& SyntheticTaskMdp::row(const PolicyTable& table,
                                                 const State& s) const {
  auto it = table.find(s);
  if (it == table.end())
    throw Error("policy has no conditional at reachable state " + format_state(s));
  return it->second;
}

void walk_support(const SyntheticTaskMdp& mdp, const PolicyTable& table,
                  const std::function<void(const State&)>& fn) {
  std::function<void(const State&)> dfs = [&](const State& s) {
    if (mdp.is_terminal(s)) return;
    fn(s);
    const auto& dist = mdp.row(table, s);
    for (TokenId y = 0; y < mdp.vocab.size; ++y) {
      if (dist[static_cast<std::size_t>(y)] <= 0.0) continue;
      if (y == mdp.vocab.eos_id) continue;
      dfs(s.child(y));
    }
  };
  for (PromptId p : mdp.prompts) dfs(State{p, {}});
}

std::vector<State> reachable_nonterminal_states(const SyntheticTaskMdp& mdp,
                                                const PolicyTable& table) {
  std::vector<State> out;
  walk_support(mdp, table, [&](const State& s) { out.push_back(s); });
  return out;
}

void validate(const SyntheticTaskMdp& mdp) {
  const auto& v = mdp.vocab;
  if (v.size < 2) throw Error("vocabulary needs at least two ordinary tokens");
  if (v.eos_id < 0 || v.eos_id >= v.size)
    throw Error("eos_id must lie inside the ordinary token range");
  if (v.abstain_id >= 0 && v.abstain_id < v.size)
    throw Error("abstain_id must lie outside the ordinary token range");
  if (mdp.horizon < 1) throw Error("horizon must be at least 1");
  if (mdp.prompts.empty()) throw Error("at least one prompt required");
  if (mdp.prompts.size() != mdp.rho.size())
    throw Error("rho length must match prompt count");
  double total = 0.0;
  for (double p : mdp.rho) {
    if (p < 0.0) throw Error("rho entries must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > kProbEps) throw Error("rho must sum to 1");

  auto check_row = [&](const PolicyTable& table, const State& s, const char* name) {
    auto it = table.find(s);
    if (it == table.end())
      throw Error(std::string(name) + " has no conditional at reachable state " +
                  format_state(s));
    const auto& dist = it->second;
    if (dist.size() != static_cast<std::size_t>(v.size))
      throw Error(std::string(name) + " row has wrong arity at " + format_state(s));
    double sum = 0.0;
    for (double p : dist) {
      if (p < 0.0)
        throw Error(std::string(name) + " has a negative probability at " + format_state(s));
      sum += p;
    }
    if (std::abs(sum - 1.0) > kProbEps)
      throw Error(std::string(name) + " row does not sum to 1 at " + format_state(s));
  };

  walk_support(mdp, mdp.pi, [&](const State& s) {
    check_row(mdp.pi, s, "pi");
    check_row(mdp.pi_ref, s, "pi_ref");
    const auto& pr = mdp.pi.at(s);
    const auto& rr = mdp.pi_ref.at(s);
    for (std::size_t y = 0; y < pr.size(); ++y)
      if (pr[y] > 0.0 && rr[y] <= 0.0)
        throw Error("support(pi) escapes support(pi_ref) at " + format_state(s) +
                    " token " + std::to_string(y));
    if (s.depth() == mdp.horizon - 1 &&
        std::abs(pr[static_cast<std::size_t>(v.eos_id)] - 1.0) > kProbEps)
      throw Error("pi must place probability 1 on eos at depth T-1, state " +
                  format_state(s));
  });

  for (const auto& [key, value] : mdp.rewards) {
    if (value < 0.0 || value > 1.0)
      throw Error("reward outside [0,1] for sequence at " + format_state(key));
    if (key.prefix.empty() || key.prefix.back() != v.eos_id)
      throw Error("reward key must be eos-terminated: " + format_state(key));
    if (key.depth() > mdp.horizon)
      throw Error("reward key exceeds horizon: " + format_state(key));
    if (contains_eos(v, key.prefix, key.prefix.size() - 1))
      throw Error("reward key has interior eos: " + format_state(key));
    for (TokenId t : key.prefix)
      if (t < 0 || t >= v.size)
        throw Error("reward key token out of range: " + format_state(key));
  }
}

double estimate_state_count(const GeneratorConfig& cfg) {
  // Conditionals are drawn at every non-terminal state: a full (v-1)-ary tree
  // of depth T-1 per prompt.
  double per_prompt = 0.0;
  double level = 1.0;
  for (int32_t d = 0; d < cfg.horizon; ++d) {
    per_prompt += level;
    level *= static_cast<double>(cfg.vocab_size - 1);
    if (per_prompt > 1e18) break;
  }
  return per_prompt * static_cast<double>(cfg.num_prompts);
}

SyntheticTaskMdp build_random_mdp(const GeneratorConfig& cfg) {
  if (cfg.vocab_size < 2) throw Error("vocab_size must be at least 2");
  if (cfg.horizon < 2) throw Error("horizon must be at least 2");
  if (cfg.num_prompts < 1) throw Error("num_prompts must be at least 1");
  if (cfg.reward_density < 0.0 || cfg.reward_density > 1.0)
    throw Error("reward_density must lie in [0,1]");
  if (cfg.concentration <= 0.0) throw Error("concentration must be positive");
  double estimate = estimate_state_count(cfg);
  if (estimate > static_cast<double>(cfg.node_budget))
    throw Error("config implies ~" + std::to_string(static_cast<int64_t>(estimate)) +
                " states, over the node budget " + std::to_string(cfg.node_budget));

  SyntheticTaskMdp mdp;
  mdp.vocab = make_vocabulary(cfg.vocab_size);
  mdp.horizon = cfg.horizon;
  mdp.prompts.resize(static_cast<std::size_t>(cfg.num_prompts));
  for (int32_t i = 0; i < cfg.num_prompts; ++i) mdp.prompts[static_cast<std::size_t>(i)] = i;

  Rng rho_rng(derive_seed(cfg.seed, "mdp.rho"));
  mdp.rho = cfg.num_prompts == 1 ? std::vector<double>{1.0}
                                 : rho_rng.dirichlet(mdp.prompts.size(), 5.0);

  Rng pi_rng(derive_seed(cfg.seed, "mdp.pi"));
  Rng ref_rng(derive_seed(cfg.seed, "mdp.pi_ref"));
  Rng reward_rng(derive_seed(cfg.seed, "mdp.rewards"));

  std::vector<double> forced(static_cast<std::size_t>(cfg.vocab_size), 0.0);
  forced[static_cast<std::size_t>(mdp.vocab.eos_id)] = 1.0;

  std::function<void(const State&)> grow = [&](const State& s) {
    if (s.depth() == cfg.horizon - 1) {
      mdp.pi[s] = forced;
      mdp.pi_ref[s] = forced;
    } else {
      mdp.pi[s] = pi_rng.dirichlet(static_cast<std::size_t>(cfg.vocab_size),
                                   cfg.concentration);
      mdp.pi_ref[s] = cfg.independent_ref
                          ? ref_rng.dirichlet(static_cast<std::size_t>(cfg.vocab_size),
                                              cfg.concentration)
                          : mdp.pi[s];
    }
    for (TokenId y = 0; y < cfg.vocab_size; ++y) {
      State c = s.child(y);
      if (y == mdp.vocab.eos_id) {
        double r = cfg.binary_rewards
                       ? (reward_rng.bernoulli(cfg.reward_density) ? 1.0 : 0.0)
                       : reward_rng.uniform();
        if (r != 0.0) mdp.rewards[c] = r;
      } else if (c.depth() < cfg.horizon) {
        grow(c);
      }
    }
  };
  for (PromptId p : mdp.prompts) grow(State{p, {}});

  validate(mdp);
  return mdp;
}

Trajectory sample_trajectory(const SyntheticTaskMdp& mdp, const PolicyTable& table,
                             PromptId prompt, Rng& rng) {
  if (mdp.rho_of(prompt) <= 0.0)
    throw Error("cannot sample prompt " + std::to_string(prompt) + " with rho = 0");
  Trajectory traj;
  traj.prompt = prompt;
  State s{prompt, {}};
  while (!mdp.is_terminal(s)) {
    const auto& dist = mdp.row(table, s);
    TokenId y = static_cast<TokenId>(rng.categorical(dist));
    traj.tokens.push_back(y);
    traj.log_prob += std::log(dist[static_cast<std::size_t>(y)]);
    const auto& ref = mdp.row(mdp.pi_ref, s);
    double pref = ref[static_cast<std::size_t>(y)];
    if (pref <= 0.0)
      throw Error("pi_ref assigns zero probability along a sampled path at " +
                  format_state(s) + " token " + std::to_string(y));
    traj.log_prob_ref += std::log(pref);
    s = s.child(y);
  }
  traj.completion_time = static_cast<int32_t>(traj.tokens.size());
  if (traj.tokens.empty() || traj.tokens.back() != mdp.vocab.eos_id)
    throw Error("rollout ended without eos (policy violates the forced-eos horizon)");
  traj.reward = mdp.reward_of(prompt, traj.tokens);
  return traj;
}

Trajectory sample_trajectory(const SyntheticTaskMdp& mdp, const PolicyTable& table,
                             Rng& rng) {
  std::size_t idx = rng.categorical(mdp.rho);
  return sample_trajectory(mdp, table, mdp.prompts[idx], rng);
}

std::vector<std::pair<Trajectory, double>> enumerate_trajectories(
    const SyntheticTaskMdp& mdp, const PolicyTable& table, PromptId prompt,
    int64_t node_budget) {
  std::vector<std::pair<Trajectory, double>> out;
  int64_t visited = 0;
  std::vector<TokenId> tokens;
  std::function<void(const State&, double, double, double)> dfs =
      [&](const State& s, double prob, double lp, double lpr) {
        if (++visited > node_budget)
          throw Error("enumeration exceeded the node budget " + std::to_string(node_budget));
        const auto& dist = mdp.row(table, s);
        const auto& ref = mdp.row(mdp.pi_ref, s);
        for (TokenId y = 0; y < mdp.vocab.size; ++y) {
          double p = dist[static_cast<std::size_t>(y)];
          if (p <= 0.0) continue;
          double pref = ref[static_cast<std::size_t>(y)];
          if (pref <= 0.0)
            throw Error("pi_ref assigns zero probability on the support at " +
                        format_state(s) + " token " + std::to_string(y));
          tokens.push_back(y);
          double nlp = lp + std::log(p);
          double nlpr = lpr + std::log(pref);
          if (y == mdp.vocab.eos_id) {
            Trajectory t;
            t.prompt = prompt;
            t.tokens = tokens;
            t.completion_time = static_cast<int32_t>(tokens.size());
            t.reward = mdp.reward_of(prompt, tokens);
            t.log_prob = nlp;
            t.log_prob_ref = nlpr;
            out.emplace_back(std::move(t), prob * p);
          } else {
            dfs(s.child(y), prob * p, nlp, nlpr);
          }
          tokens.pop_back();
        }
      };
  dfs(State{prompt, {}}, 1.0, 0.0, 0.0);
  return out;
}

namespace {

json policy_to_json(const PolicyTable& table) {
  json rows = json::array();
  for (const auto& [s, dist] : table)
    rows.push_back(json{{"prompt", s.prompt}, {"prefix", s.prefix}, {"dist", dist}});
  return rows;
}

PolicyTable policy_from_json(const json& rows) {
  PolicyTable table;
  for (const auto& row : rows) {
    State s{row.at("prompt").get<PromptId>(), row.at("prefix").get<std::vector<TokenId>>()};
    table[s] = row.at("dist").get<std::vector<double>>();
  }
  return table;
}

}  // namespace

std::string mdp_to_json(const SyntheticTaskMdp& mdp) {
  json j;
  j["version"] = 1;
  j["vocab"] = {{"size", mdp.vocab.size},
                {"eos_id", mdp.vocab.eos_id},
                {"abstain_id", mdp.vocab.abstain_id}};
  j["horizon"] = mdp.horizon;
  j["prompts"] = mdp.prompts;
  j["rho"] = mdp.rho;
  j["pi"] = policy_to_json(mdp.pi);
  j["pi_ref"] = policy_to_json(mdp.pi_ref);
  json rewards = json::array();
  for (const auto& [s, r] : mdp.rewards)
    rewards.push_back(json{{"prompt", s.prompt}, {"sequence", s.prefix}, {"value", r}});
  j["rewards"] = rewards;
  return j.dump(2);
}

SyntheticTaskMdp mdp_from_json(const std::string& text) {
  json j = json::parse(text);
  if (!j.contains("version") || j.at("version").get<int>() != 1)
    throw Error("unsupported mdp schema version");
  SyntheticTaskMdp mdp;
  mdp.vocab.size = j.at("vocab").at("size").get<int32_t>();
  mdp.vocab.eos_id = j.at("vocab").at("eos_id").get<TokenId>();
  mdp.vocab.abstain_id = j.at("vocab").at("abstain_id").get<TokenId>();
  mdp.horizon = j.at("horizon").get<int32_t>();
  mdp.prompts = j.at("prompts").get<std::vector<PromptId>>();
  mdp.rho = j.at("rho").get<std::vector<double>>();
  mdp.pi = policy_from_json(j.at("pi"));
  mdp.pi_ref = policy_from_json(j.at("pi_ref"));
  for (const auto& row : j.at("rewards")) {
    State s{row.at("prompt").get<PromptId>(),
            row.at("sequence").get<std::vector<TokenId>>()};
    mdp.rewards[s] = row.at("value").get<double>();
  }
  validate(mdp);
  return mdp;
}

void save_mdp(const SyntheticTaskMdp& mdp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << mdp_to_json(mdp) << '\n';
}

SyntheticTaskMdp load_mdp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return mdp_from_json(buf.str());
}

std::string trajectories_to_jsonl(const std::vector<Trajectory>& trajs) {
  std::ostringstream os;
  for (const auto& t : trajs) {
    json j{{"prompt", t.prompt},
           {"tokens", t.tokens},
           {"c", t.completion_time},
           {"reward", t.reward},
           {"log_prob", t.log_prob},
           {"log_prob_ref", t.log_prob_ref}};
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<Trajectory> trajectories_from_jsonl(const std::string& text) {
  std::vector<Trajectory> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Trajectory t;
    t.prompt = j.at("prompt").get<PromptId>();
    t.tokens = j.at("tokens").get<std::vector<TokenId>>();
    t.completion_time = j.at("c").get<int32_t>();
    t.reward = j.at("reward").get<double>();
    t.log_prob = j.at("log_prob").get<double>();
    t.log_prob_ref = j.at("log_prob_ref").get<double>();
    if (t.completion_time != static_cast<int32_t>(t.tokens.size()))
      throw Error("trajectory record with inconsistent completion time");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace dynabs

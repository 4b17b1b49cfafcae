#include "dynabs/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace dynabs {

namespace {

using nlohmann::json;

constexpr double kBceClampLo = 1e-6;
constexpr double kBceClampHi = 1.0 - 1e-6;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

FeatureMap FeatureMap::tabular(const SyntheticTaskMdp& mdp) {
  FeatureMap fm;
  fm.mode_ = FeatureMode::kTabular;
  int32_t next = 0;
  for (const State& s : reachable_nonterminal_states(mdp, mdp.pi))
    fm.index_.emplace(s, next++);
  fm.dim_ = next;
  if (fm.dim_ == 0) throw Error("no non-terminal states to index");
  return fm;
}

FeatureMap FeatureMap::engineered(const SyntheticTaskMdp& mdp) {
  FeatureMap fm;
  fm.mode_ = FeatureMode::kEngineered;
  fm.num_prompts_ = static_cast<int32_t>(mdp.prompts.size());
  fm.vocab_size_ = mdp.vocab.size;
  fm.horizon_ = mdp.horizon;
  // prompt one-hot | depth fraction | last-token one-hot (incl. "none") |
  // token histogram
  fm.dim_ = fm.num_prompts_ + 1 + (fm.vocab_size_ + 1) + fm.vocab_size_;
  return fm;
}

std::vector<double> FeatureMap::features(const SyntheticTaskMdp& mdp, const State& s) const {
  if (mdp.is_terminal(s))
    throw Error("features are undefined at terminal state " + format_state(s));
  std::vector<double> x(static_cast<std::size_t>(dim_), 0.0);
  if (mode_ == FeatureMode::kTabular) {
    auto it = index_.find(s);
    if (it == index_.end())
      throw Error("state outside the tabular feature domain: " + format_state(s));
    x[static_cast<std::size_t>(it->second)] = 1.0;
    return x;
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i)
    if (mdp.prompts[i] == s.prompt) x[pos + i] = 1.0;
  pos += static_cast<std::size_t>(num_prompts_);
  x[pos++] = static_cast<double>(s.depth()) / static_cast<double>(horizon_);
  std::size_t last = s.prefix.empty()
                         ? 0
                         : static_cast<std::size_t>(s.prefix.back()) + 1;
  x[pos + last] = 1.0;
  pos += static_cast<std::size_t>(vocab_size_) + 1;
  for (TokenId t : s.prefix)
    x[pos + static_cast<std::size_t>(t)] += 1.0 / static_cast<double>(horizon_);
  return x;
}

std::string FeatureMap::to_json() const {
  json j;
  if (mode_ == FeatureMode::kTabular) {
    j["mode"] = "tabular";
    json states = json::array();
    // index_ is ordered by state; emit in index order for stability.
    std::vector<const State*> by_index(index_.size());
    for (const auto& [s, i] : index_) by_index[static_cast<std::size_t>(i)] = &s;
    for (const State* s : by_index)
      states.push_back(json{{"prompt", s->prompt}, {"prefix", s->prefix}});
    j["states"] = states;
  } else {
    j["mode"] = "engineered";
    j["num_prompts"] = num_prompts_;
    j["vocab_size"] = vocab_size_;
    j["horizon"] = horizon_;
  }
  j["dim"] = dim_;
  return j.dump();
}

FeatureMap FeatureMap::from_json(const std::string& text) {
  json j = json::parse(text);
  FeatureMap fm;
  std::string mode = j.at("mode").get<std::string>();
  fm.dim_ = j.at("dim").get<int32_t>();
  if (mode == "tabular") {
    fm.mode_ = FeatureMode::kTabular;
    int32_t i = 0;
    for (const auto& row : j.at("states")) {
      State s{row.at("prompt").get<PromptId>(),
              row.at("prefix").get<std::vector<TokenId>>()};
      fm.index_.emplace(std::move(s), i++);
    }
    if (i != fm.dim_) throw Error("tabular feature map dim mismatch");
  } else if (mode == "engineered") {
    fm.mode_ = FeatureMode::kEngineered;
    fm.num_prompts_ = j.at("num_prompts").get<int32_t>();
    fm.vocab_size_ = j.at("vocab_size").get<int32_t>();
    fm.horizon_ = j.at("horizon").get<int32_t>();
  } else {
    throw Error("unknown feature map mode: " + mode);
  }
  return fm;
}

TrainingSet build_training_set(const SyntheticTaskMdp& mdp,
                               const std::vector<Trajectory>& trajectories,
                               LabelKind kind, double beta) {
  TrainingSet set;
  for (const Trajectory& traj : trajectories) {
    double label = traj.reward;
    if (kind == LabelKind::kKlAdjustedReturn)
      label -= beta * (traj.log_prob - traj.log_prob_ref);
    State s{traj.prompt, {}};
    for (TokenId y : traj.tokens) {
      if (mdp.is_terminal(s))
        throw Error("trajectory runs past a terminal state");
      set.records.push_back(TrainingRecord{s, label});
      s = s.child(y);
    }
  }
  return set;
}

TrainingSet filter_by_position(const TrainingSet& set, int32_t position) {
  TrainingSet out;
  for (const auto& r : set.records)
    if (r.state.depth() == position) out.records.push_back(r);
  return out;
}

void write_training_set_csv(const std::string& path, const TrainingSet& set) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.training_set.v1\n";
  out << "prompt_id,prefix,label\n";
  out.precision(17);
  for (const auto& r : set.records) {
    out << r.state.prompt << ',';
    for (std::size_t i = 0; i < r.state.prefix.size(); ++i) {
      if (i) out << ';';
      out << r.state.prefix[i];
    }
    out << ',' << r.label << '\n';
  }
}

TrainingSet read_training_set_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# dynabs.training_set.v1")
    throw Error("training set schema mismatch in " + path);
  if (!std::getline(in, line) || line != "prompt_id,prefix,label")
    throw Error("training set header mismatch in " + path);
  TrainingSet set;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string prompt_s, prefix_s, label_s;
    if (!std::getline(row, prompt_s, ',') || !std::getline(row, prefix_s, ',') ||
        !std::getline(row, label_s))
      throw Error("malformed training set row: " + line);
    TrainingRecord r;
    r.state.prompt = static_cast<PromptId>(std::stol(prompt_s));
    if (!prefix_s.empty()) {
      std::istringstream ps(prefix_s);
      std::string tok;
      while (std::getline(ps, tok, ';'))
        r.state.prefix.push_back(static_cast<TokenId>(std::stol(tok)));
    }
    r.label = std::stod(label_s);
    set.records.push_back(std::move(r));
  }
  return set;
}

std::map<State, double> tabular_bayes_oracle(const TrainingSet& set) {
  std::map<State, double> sums;
  std::map<State, int64_t> counts;
  for (const auto& r : set.records) {
    sums[r.state] += r.label;
    counts[r.state] += 1;
  }
  for (auto& [s, v] : sums) v /= static_cast<double>(counts.at(s));
  return sums;
}

std::map<State, int64_t> state_record_counts(const TrainingSet& set) {
  std::map<State, int64_t> counts;
  for (const auto& r : set.records) counts[r.state] += 1;
  return counts;
}

double Probe::forward(const std::vector<double>& x) const {
  if (x.size() != static_cast<std::size_t>(input_dim))
    throw Error("probe input has wrong dimension");
  double z2 = b2;
  for (int32_t h = 0; h < hidden_dim; ++h) {
    double z1 = b1[static_cast<std::size_t>(h)];
    const double* row = w1.data() + static_cast<std::size_t>(h) * x.size();
    for (std::size_t i = 0; i < x.size(); ++i) z1 += row[i] * x[i];
    z2 += w2[static_cast<std::size_t>(h)] * std::tanh(z1);
  }
  return sigmoid(z2);
}

double Probe::predict(const SyntheticTaskMdp& mdp, const State& s) const {
  if (mdp.is_terminal(s)) return 0.0;
  return forward(fmap.features(mdp, s));
}

namespace {

struct Gradients {
  std::vector<double> w1, b1, w2;
  double b2 = 0.0;
};

// Backprop for one record; dz2 is dLoss/dz2 already including the loss head.
void accumulate(const Probe& p, const std::vector<double>& x, double dz2, Gradients& g) {
  for (int32_t h = 0; h < p.hidden_dim; ++h) {
    double z1 = p.b1[static_cast<std::size_t>(h)];
    const double* row = p.w1.data() + static_cast<std::size_t>(h) * x.size();
    for (std::size_t i = 0; i < x.size(); ++i) z1 += row[i] * x[i];
    double t = std::tanh(z1);
    double dw2 = dz2 * t;
    g.w2[static_cast<std::size_t>(h)] += dw2;
    double dz1 = dz2 * p.w2[static_cast<std::size_t>(h)] * (1.0 - t * t);
    g.b1[static_cast<std::size_t>(h)] += dz1;
    double* grow = g.w1.data() + static_cast<std::size_t>(h) * x.size();
    for (std::size_t i = 0; i < x.size(); ++i) grow[i] += dz1 * x[i];
  }
  g.b2 += dz2;
}

// dLoss/dz2 and the loss value for one record.
std::pair<double, double> loss_head(double p, double y, LossKind loss) {
  if (loss == LossKind::kBce) {
    double pc = std::clamp(p, kBceClampLo, kBceClampHi);
    double l = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
    // The clamp is part of the loss: outside it the prediction gradient is 0.
    double dz2 = (p > kBceClampLo && p < kBceClampHi) ? (p - y) : 0.0;
    return {l, dz2};
  }
  double diff = p - y;
  return {diff * diff, 2.0 * diff * p * (1.0 - p)};
}

}  // namespace

Probe train_probe(const SyntheticTaskMdp& mdp, FeatureMap fmap, const TrainingSet& set,
                  LossKind loss, const ProbeConfig& config, TrainReport* report) {
  if (set.records.empty()) throw Error("training set is empty");
  if (config.hidden_dim < 1) throw Error("hidden_dim must be positive");
  if (config.epochs < 0) throw Error("epochs must be non-negative");
  if (config.batch_size < 1) throw Error("batch_size must be positive");
  if (!(config.learning_rate > 0.0)) throw Error("learning_rate must be positive");
  if (loss == LossKind::kBce)
    for (const auto& r : set.records)
      if (r.label < 0.0 || r.label > 1.0)
        throw Error("BCE training requires labels in [0,1]");

  Probe probe;
  probe.fmap = std::move(fmap);
  probe.loss = loss;
  probe.config = config;
  probe.input_dim = probe.fmap.dim();
  probe.hidden_dim = config.hidden_dim;
  std::size_t n_in = static_cast<std::size_t>(probe.input_dim);
  std::size_t n_h = static_cast<std::size_t>(probe.hidden_dim);
  probe.w1.assign(n_h * n_in, 0.0);
  probe.b1.assign(n_h, 0.0);
  probe.w2.assign(n_h, 0.0);
  probe.b2 = 0.0;

  Rng rng(config.seed);
  double s1 = 1.0 / std::sqrt(static_cast<double>(probe.input_dim));
  for (auto& w : probe.w1) w = rng.uniform(-s1, s1);
  double s2 = 1.0 / std::sqrt(static_cast<double>(probe.hidden_dim));
  for (auto& w : probe.w2) w = rng.uniform(-s2, s2);

  std::vector<std::vector<double>> xs;
  std::vector<double> ys;
  xs.reserve(set.records.size());
  ys.reserve(set.records.size());
  for (const auto& r : set.records) {
    xs.push_back(probe.fmap.features(mdp, r.state));
    ys.push_back(r.label);
  }

  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  Gradients g;
  for (int32_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Cosine decay: late epochs take small steps, so minibatch noise
    // stops dominating once the fit is close.
    double lr = config.learning_rate * 0.5 *
                (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, config.epochs)));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end = std::min(order.size(),
                                 start + static_cast<std::size_t>(config.batch_size));
      g.w1.assign(probe.w1.size(), 0.0);
      g.b1.assign(probe.b1.size(), 0.0);
      g.w2.assign(probe.w2.size(), 0.0);
      g.b2 = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& x = xs[order[i]];
        double p = probe.forward(x);
        auto [l, dz2] = loss_head(p, ys[order[i]], loss);
        (void)l;
        accumulate(probe, x, dz2, g);
      }
      double scale = lr / static_cast<double>(end - start);
      for (std::size_t i = 0; i < probe.w1.size(); ++i) probe.w1[i] -= scale * g.w1[i];
      for (std::size_t i = 0; i < probe.b1.size(); ++i) probe.b1[i] -= scale * g.b1[i];
      for (std::size_t i = 0; i < probe.w2.size(); ++i) probe.w2[i] -= scale * g.w2[i];
      probe.b2 -= scale * g.b2;
    }
    if (report != nullptr) report->epoch_losses.push_back(batch_loss(probe, xs, ys, loss));
  }

  if (report != nullptr) {
    report->final_loss = batch_loss(probe, xs, ys, loss);
    report->epochs = config.epochs;
    report->n_records = static_cast<int64_t>(set.records.size());
  }
  return probe;
}

std::vector<double> flatten_params(const Probe& probe) {
  std::vector<double> out;
  out.reserve(probe.w1.size() + probe.b1.size() + probe.w2.size() + 1);
  out.insert(out.end(), probe.w1.begin(), probe.w1.end());
  out.insert(out.end(), probe.b1.begin(), probe.b1.end());
  out.insert(out.end(), probe.w2.begin(), probe.w2.end());
  out.push_back(probe.b2);
  return out;
}

void unflatten_params(Probe& probe, const std::vector<double>& params) {
  std::size_t want = probe.w1.size() + probe.b1.size() + probe.w2.size() + 1;
  if (params.size() != want) throw Error("parameter vector has wrong length");
  std::size_t pos = 0;
  for (auto& w : probe.w1) w = params[pos++];
  for (auto& b : probe.b1) b = params[pos++];
  for (auto& w : probe.w2) w = params[pos++];
  probe.b2 = params[pos];
}

double batch_loss(const Probe& probe, const std::vector<std::vector<double>>& xs,
                  const std::vector<double>& ys, LossKind loss) {
  if (xs.empty() || xs.size() != ys.size()) throw Error("bad batch");
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    total += loss_head(probe.forward(xs[i]), ys[i], loss).first;
  return total / static_cast<double>(xs.size());
}

std::vector<double> batch_loss_gradient(const Probe& probe,
                                        const std::vector<std::vector<double>>& xs,
                                        const std::vector<double>& ys, LossKind loss) {
  if (xs.empty() || xs.size() != ys.size()) throw Error("bad batch");
  Gradients g;
  g.w1.assign(probe.w1.size(), 0.0);
  g.b1.assign(probe.b1.size(), 0.0);
  g.w2.assign(probe.w2.size(), 0.0);
  g.b2 = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double p = probe.forward(xs[i]);
    auto [l, dz2] = loss_head(p, ys[i], loss);
    (void)l;
    accumulate(probe, xs[i], dz2, g);
  }
  double inv = 1.0 / static_cast<double>(xs.size());
  std::vector<double> out;
  out.reserve(g.w1.size() + g.b1.size() + g.w2.size() + 1);
  for (double v : g.w1) out.push_back(v * inv);
  for (double v : g.b1) out.push_back(v * inv);
  for (double v : g.w2) out.push_back(v * inv);
  out.push_back(g.b2 * inv);
  return out;
}

double gradient_check(const SyntheticTaskMdp& mdp, const FeatureMap& fmap,
                      const TrainingSet& set, LossKind loss, int32_t n_points,
                      double fd_step, uint64_t seed) {
  if (set.records.empty()) throw Error("gradient check needs records");
  Probe probe;
  probe.fmap = fmap;
  probe.input_dim = fmap.dim();
  probe.hidden_dim = 4;
  probe.w1.assign(static_cast<std::size_t>(probe.input_dim) * 4, 0.0);
  probe.b1.assign(4, 0.0);
  probe.w2.assign(4, 0.0);

  std::vector<std::vector<double>> xs;
  std::vector<double> ys;
  for (const auto& r : set.records) {
    xs.push_back(fmap.features(mdp, r.state));
    ys.push_back(r.label);
  }

  Rng rng(seed);
  std::size_t n_params = flatten_params(probe).size();
  double worst = 0.0;
  for (int32_t point = 0; point < n_points; ++point) {
    std::vector<double> params(n_params);
    for (auto& p : params) p = rng.uniform(-1.0, 1.0);
    unflatten_params(probe, params);
    std::vector<double> analytic = batch_loss_gradient(probe, xs, ys, loss);
    // One random coordinate per point keeps the check O(n_points) evals.
    std::size_t j = static_cast<std::size_t>(rng.next_below(n_params));
    std::vector<double> bumped = params;
    bumped[j] = params[j] + fd_step;
    unflatten_params(probe, bumped);
    double up = batch_loss(probe, xs, ys, loss);
    bumped[j] = params[j] - fd_step;
    unflatten_params(probe, bumped);
    double down = batch_loss(probe, xs, ys, loss);
    double numeric = (up - down) / (2.0 * fd_step);
    double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
  }
  return worst;
}

std::string probe_to_json(const Probe& probe) {
  json j;
  j["version"] = 1;
  j["feature_map"] = json::parse(probe.fmap.to_json());
  j["architecture"] = {{"input_dim", probe.input_dim}, {"hidden_dim", probe.hidden_dim}};
  j["weights"] = {{"w1", probe.w1}, {"b1", probe.b1}, {"w2", probe.w2}, {"b2", probe.b2}};
  j["training_config"] = {{"loss", probe.loss == LossKind::kBce ? "bce" : "mse"},
                          {"hidden_dim", probe.config.hidden_dim},
                          {"learning_rate", probe.config.learning_rate},
                          {"epochs", probe.config.epochs},
                          {"batch_size", probe.config.batch_size},
                          {"seed", probe.config.seed}};
  return j.dump(2);
}

Probe probe_from_json(const std::string& text) {
  json j = json::parse(text);
  if (!j.contains("version") || j.at("version").get<int>() != 1)
    throw Error("unsupported probe schema version");
  Probe probe;
  probe.fmap = FeatureMap::from_json(j.at("feature_map").dump());
  probe.input_dim = j.at("architecture").at("input_dim").get<int32_t>();
  probe.hidden_dim = j.at("architecture").at("hidden_dim").get<int32_t>();
  probe.w1 = j.at("weights").at("w1").get<std::vector<double>>();
  probe.b1 = j.at("weights").at("b1").get<std::vector<double>>();
  probe.w2 = j.at("weights").at("w2").get<std::vector<double>>();
  probe.b2 = j.at("weights").at("b2").get<double>();
  const auto& tc = j.at("training_config");
  probe.loss = tc.at("loss").get<std::string>() == "mse" ? LossKind::kMse : LossKind::kBce;
  probe.config.hidden_dim = tc.at("hidden_dim").get<int32_t>();
  probe.config.learning_rate = tc.at("learning_rate").get<double>();
  probe.config.epochs = tc.at("epochs").get<int32_t>();
  probe.config.batch_size = tc.at("batch_size").get<int32_t>();
  probe.config.seed = tc.at("seed").get<uint64_t>();
  if (probe.w1.size() != static_cast<std::size_t>(probe.input_dim) *
                             static_cast<std::size_t>(probe.hidden_dim) ||
      probe.b1.size() != static_cast<std::size_t>(probe.hidden_dim) ||
      probe.w2.size() != static_cast<std::size_t>(probe.hidden_dim))
    throw Error("probe weight shapes do not match the declared architecture");
  return probe;
}

void save_probe(const Probe& probe, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << probe_to_json(probe) << '\n';
}

Probe load_probe(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return probe_from_json(buf.str());
}

}  // namespace dynabs

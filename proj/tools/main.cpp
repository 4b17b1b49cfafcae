// dynabs command-line driver. Every subcommand reads a flat key=value config
// (file via --config, overrides as positional key=value pairs), derives all
// randomness from explicit seeds, and writes versioned CSV/JSON artifacts
// under the output root, so re-runs are byte-identical.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dynabs/abstention.hpp"
#include "dynabs/calibration.hpp"
#include "dynabs/config.hpp"
#include "dynabs/estimator.hpp"
#include "dynabs/evaluation.hpp"
#include "dynabs/fixtures.hpp"
#include "dynabs/mdp.hpp"
#include "dynabs/value.hpp"

namespace {

using namespace dynabs;

KeyValueConfig load_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  KeyValueConfig cfg = config_path.empty() ? KeyValueConfig::parse_text("", "<defaults>")
                                           : KeyValueConfig::parse_file(config_path);
  for (const std::string& kv : overrides) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw Error("override '" + kv + "' is not of the form key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

const std::vector<double> kDefaultAlphas = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
const std::vector<double> kDefaultSeeds = {42, 43, 44, 45, 46};

std::vector<uint64_t> seeds_from(const KeyValueConfig& cfg) {
  std::vector<double> raw = cfg.get_double_list("seeds", kDefaultSeeds);
  if (raw.empty()) throw Error("seeds must be non-empty");
  std::vector<uint64_t> seeds;
  for (double s : raw) seeds.push_back(static_cast<uint64_t>(s));
  return seeds;
}

std::vector<double> alphas_from(const KeyValueConfig& cfg) {
  std::vector<double> alphas = cfg.get_double_list("alpha_grid", kDefaultAlphas);
  if (alphas.empty()) throw Error("alpha_grid must be non-empty");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (alphas[i] < 0.0 || alphas[i] > 1.0)
      throw Error("alpha_grid values must lie in [0,1]");
    if (i > 0 && alphas[i] <= alphas[i - 1])
      throw Error("alpha_grid must be strictly increasing");
  }
  return alphas;
}

// mdp= loads a file; otherwise the generator keys build one in place.
SyntheticTaskMdp mdp_from(const KeyValueConfig& cfg) {
  std::string path = cfg.get_string("mdp", "");
  if (!path.empty()) return load_mdp(path);
  return build_random_mdp(generator_config_from(cfg));
}

// Value estimates for the rules: the literal ORACLE, or a probe file.
struct ValueChoice {
  std::string label;
  Probe probe;
  std::unique_ptr<ValueSource> source;
  bool is_oracle = false;
};

ValueChoice values_from(const KeyValueConfig& cfg, const SyntheticTaskMdp& mdp,
                        double beta) {
  ValueChoice v;
  v.label = cfg.get_string("values", "ORACLE");
  if (v.label == "ORACLE") {
    v.source = make_oracle_source(mdp, mdp.pi, beta);
    v.is_oracle = true;
  } else {
    v.probe = load_probe(v.label);
    v.source = std::make_unique<ProbeValueSource>(mdp, v.probe);
  }
  return v;
}

std::vector<int32_t> fixed_ks_from(const KeyValueConfig& cfg, int32_t horizon) {
  std::vector<double> raw = cfg.get_double_list("fixed_k", {});
  std::vector<int32_t> ks;
  if (raw.empty()) {
    for (int32_t k = 1; k < horizon; ++k) ks.push_back(k);
    return ks;
  }
  for (double d : raw) {
    int32_t k = static_cast<int32_t>(d);
    if (k < 1 || k >= horizon) throw Error("fixed_k entries must lie in [1, horizon)");
    ks.push_back(k);
  }
  return ks;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const KeyValueConfig& cfg) {
  GeneratorConfig gen = generator_config_from(cfg);
  int64_t n_traj = cfg.get_int("n_traj", 1000);
  std::string mdp_out = output_path(cfg.get_string("mdp_out", "mdp.json"));
  std::string traj_out = output_path(cfg.get_string("traj_out", "trajectories.jsonl"));
  cfg.finish();
  if (n_traj < 0) throw Error("n_traj must be non-negative");

  SyntheticTaskMdp mdp = build_random_mdp(gen);
  std::vector<Trajectory> trajs;
  trajs.reserve(static_cast<std::size_t>(n_traj));
  for (int64_t i = 0; i < n_traj; ++i) {
    Rng rng(derive_seed(gen.seed, "trajectory", static_cast<uint64_t>(i)));
    trajs.push_back(sample_trajectory(mdp, mdp.pi, rng));
  }
  save_mdp(mdp, mdp_out);
  write_text(traj_out, trajectories_to_jsonl(trajs));
  std::cout << "mdp: " << mdp_out << "\n"
            << "trajectories: " << traj_out << " (" << trajs.size() << " lines)\n";
  return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const KeyValueConfig& cfg) {
  std::string mdp_path = cfg.get_string("mdp", "");
  std::string dataset = cfg.get_string("dataset", "");
  if (mdp_path.empty()) throw Error("train needs mdp=<path>");
  if (dataset.empty()) throw Error("train needs dataset=<path>");
  std::string loss_name = cfg.get_string("loss", "bce");
  std::string feature_name = cfg.get_string("features", "tabular");
  std::string label_name = cfg.get_string("label", "reward");
  double beta = cfg.get_double("beta", 0.0);
  ProbeConfig pcfg = probe_config_from(cfg);
  std::string probe_out = output_path(cfg.get_string("probe_out", "probe.json"));
  std::string curve_out = output_path(cfg.get_string("loss_curve_out", "train_loss.csv"));
  cfg.finish();

  LossKind loss;
  if (loss_name == "bce")
    loss = LossKind::kBce;
  else if (loss_name == "mse")
    loss = LossKind::kMse;
  else
    throw Error("loss must be bce or mse");
  LabelKind label;
  if (label_name == "reward")
    label = LabelKind::kTerminalReward;
  else if (label_name == "kl_return")
    label = LabelKind::kKlAdjustedReturn;
  else
    throw Error("label must be reward or kl_return");

  SyntheticTaskMdp mdp = load_mdp(mdp_path);
  std::ifstream in(dataset);
  if (!in) throw Error("cannot open dataset " + dataset);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<Trajectory> trajs = trajectories_from_jsonl(text);
  TrainingSet set = build_training_set(mdp, trajs, label, beta);

  FeatureMap fmap = feature_name == "tabular"    ? FeatureMap::tabular(mdp)
                    : feature_name == "engineered" ? FeatureMap::engineered(mdp)
                                                   : throw Error("features must be tabular or engineered");
  TrainReport report;
  Probe probe = train_probe(mdp, std::move(fmap), set, loss, pcfg, &report);
  save_probe(probe, probe_out);

  std::string curve = "# dynabs.train_loss.v1\nepoch,loss\n";
  for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e + 1, report.epoch_losses[e]);
    curve += buf;
  }
  write_text(curve_out, curve);

  // Tabular-realizable ground truth: per-state frequency of the labels.
  std::map<State, double> bayes = tabular_bayes_oracle(set);
  std::map<State, int64_t> counts = state_record_counts(set);
  double max_err = 0.0, max_err_50 = 0.0;
  for (const auto& [state, freq] : bayes) {
    double err = std::abs(probe.predict(mdp, state) - freq);
    max_err = std::max(max_err, err);
    if (counts.at(state) >= 50) max_err_50 = std::max(max_err_50, err);
  }
  std::cout << "probe: " << probe_out << "\n"
            << "loss_curve: " << curve_out << "\n"
            << "loss_family: " << loss_name << "\n"
            << "records: " << report.n_records << "\n"
            << "final_loss: " << report.final_loss << "\n"
            << "max_abs_err_vs_bayes: " << max_err << "\n"
            << "max_abs_err_vs_bayes_min50: " << max_err_50 << "\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

std::vector<EvalReport> sweep_methods(const std::vector<RolloutTrace>& traces,
                                      const std::vector<double>& weights, bool exact,
                                      const std::vector<int32_t>& ks,
                                      const std::vector<double>& alphas, double r_bot,
                                      uint64_t seed) {
  auto run = [&](SelectionMethod m, int32_t k, const std::vector<double>& grid) {
    return exact ? evaluate_rate_targeted_exact(traces, weights, m, k, grid, r_bot)
                 : evaluate_rate_targeted(traces, m, k, grid, r_bot, seed);
  };
  // alpha = 0 keeps everything, so the no-abstention baseline is the same
  // operating point replicated across the grid.
  std::vector<EvalReport> rows;
  EvalReport keep_all = run(SelectionMethod::kDynamicMin, 1, {0.0}).front();
  keep_all.method = "none";
  for (double alpha : alphas) {
    keep_all.alpha_target = alpha;
    rows.push_back(keep_all);
  }
  auto dyn = run(SelectionMethod::kDynamicMin, 1, alphas);
  rows.insert(rows.end(), dyn.begin(), dyn.end());
  for (int32_t k : ks) {
    auto fx = run(SelectionMethod::kFixedPosition, k, alphas);
    rows.insert(rows.end(), fx.begin(), fx.end());
  }
  return rows;
}

int cmd_evaluate(const KeyValueConfig& cfg) {
  SyntheticTaskMdp mdp = mdp_from(cfg);
  double beta = cfg.get_double("beta", 0.0);
  double r_bot = cfg.get_double("r_bot", 0.5);
  bool exact = cfg.get_bool("exact", false);
  int64_t n_traj = cfg.get_int("n_traj", 2000);
  std::vector<double> alphas = alphas_from(cfg);
  std::vector<uint64_t> seeds = seeds_from(cfg);
  std::vector<int32_t> ks = fixed_ks_from(cfg, mdp.horizon);
  ValueChoice values = values_from(cfg, mdp, beta);
  std::string out = output_path(cfg.get_string("eval_out", "eval_report.csv"));
  cfg.finish();

  std::vector<EvalReport> rows;
  std::vector<std::vector<EvalReport>> oracle_dyn_per_seed;
  ValueChoice oracle;
  if (!values.is_oracle) oracle.source = make_oracle_source(mdp, mdp.pi, beta);

  if (exact) {
    std::vector<RolloutTrace> traces;
    std::vector<double> weights;
    for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
      if (mdp.rho[i] <= 0.0) continue;
      for (auto& [tr, p] : enumerate_traces(mdp, mdp.pi, *values.source, mdp.prompts[i])) {
        traces.push_back(tr);
        weights.push_back(p * mdp.rho[i]);
      }
    }
    rows = sweep_methods(traces, weights, true, ks, alphas, r_bot, 0);
  } else {
    for (uint64_t seed : seeds) {
      Rng rng(derive_seed(seed, "evaluate"));
      std::vector<RolloutTrace> traces =
          collect_traces(mdp, mdp.pi, *values.source, n_traj, rng);
      auto seed_rows = sweep_methods(traces, {}, false, ks, alphas, r_bot, seed);
      rows.insert(rows.end(), seed_rows.begin(), seed_rows.end());
      if (!values.is_oracle) {
        // Same rollouts re-annotated with oracle values, for the soft check.
        Rng rng2(derive_seed(seed, "evaluate"));
        std::vector<RolloutTrace> oracle_traces =
            collect_traces(mdp, mdp.pi, *oracle.source, n_traj, rng2);
        oracle_dyn_per_seed.push_back(evaluate_rate_targeted(
            oracle_traces, SelectionMethod::kDynamicMin, 1, alphas, r_bot, seed));
      }
    }
  }
  write_eval_reports_csv(out, rows);
  std::cout << "eval_report: " << out << " (" << rows.size() << " rows)\n";

  if (!values.is_oracle && !oracle_dyn_per_seed.empty()) {
    // Estimated values cannot rank better than the exact ones; report (not
    // assert) how often the sampled sweep agrees.
    std::size_t si = 0, worse = 0, total = 0;
    double max_excess = 0.0;
    for (uint64_t seed : seeds) {
      const auto& oracle_rows = oracle_dyn_per_seed[si++];
      for (const auto& orow : oracle_rows) {
        for (const auto& prow : rows) {
          if (prow.seed != seed || prow.method != "dynamic" ||
              prow.alpha_target != orow.alpha_target)
            continue;
          ++total;
          if (prow.selective > orow.selective + 1e-12) {
            ++worse;
            max_excess = std::max(max_excess, prow.selective - orow.selective);
          }
        }
      }
    }
    std::cout << "soft check (probe S <= oracle S per alpha/seed): " << (total - worse)
              << "/" << total << " hold; max excess " << max_excess << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------ verify

TheoremReport control_report(const std::string& name, bool tripped,
                             const std::string& on_miss) {
  TheoremReport rep;
  rep.theorem = name;
  rep.checks = 1;
  if (!tripped) rep.violations.push_back(on_miss);
  return rep;
}

int cmd_verify(const KeyValueConfig& cfg) {
  int64_t n_mdps = cfg.get_int("n_mdps", 200);
  uint64_t seed = cfg.get_uint("seed", 7);
  std::vector<double> thresholds =
      cfg.get_double_list("thresholds", {0.1, 0.3, 0.5, 0.7, 0.9});
  std::vector<double> betas = cfg.get_double_list("betas", {0.0, 0.1});
  bool controls = cfg.get_bool("controls", true);
  std::string out = output_path(cfg.get_string("report_out", "theorem_report.json"));
  cfg.finish();
  if (n_mdps < 1) throw Error("n_mdps must be positive");

  std::map<std::string, TheoremReport> merged;
  auto add = [&](TheoremReport rep) {
    auto [it, inserted] = merged.try_emplace(rep.theorem, rep);
    if (!inserted) it->second.merge(rep);
  };

  for (int64_t i = 0; i < n_mdps; ++i) {
    Rng pick(derive_seed(seed, "verify", static_cast<uint64_t>(i)));
    GeneratorConfig gen;
    gen.vocab_size = 2 + static_cast<int32_t>(pick.next_below(3));
    gen.horizon = 2 + static_cast<int32_t>(pick.next_below(4));
    gen.num_prompts = 1 + static_cast<int32_t>(pick.next_below(2));
    gen.reward_density = pick.uniform(0.15, 0.75);
    gen.concentration = pick.uniform(0.5, 2.0);
    gen.seed = pick.next_u64();
    for (double beta : betas) {
      gen.independent_ref = beta != 0.0;
      SyntheticTaskMdp mdp = build_random_mdp(gen);
      for (double r_bot : thresholds) {
        add(verify_value_dominance(mdp, beta, r_bot));
        add(verify_objective_dominance(mdp, beta, r_bot));
        add(verify_oracle_equivalence(mdp, beta, r_bot));
        if (beta == 0.0) {
          add(verify_optimal_abstention(mdp, r_bot));
          add(verify_binary_gap_bound(mdp, r_bot));
        }
        for (int32_t k = 1; k < mdp.horizon; ++k) {
          add(verify_fixed_position_gap(mdp, beta, r_bot, k));
          add(verify_corollaries(mdp, beta, r_bot, k));
        }
      }
    }
  }

  if (controls) {
    // Each control must trip its failure path; a silent pass is the bug.
    SyntheticTaskMdp toy = fixtures::two_branch_toy();
    AbstentionRule mutant = dynamic_rule(0.5);
    mutant.abstain_on_ties = true;
    TheoremReport tie = verify_value_dominance(toy, 0.0, 0.5, &mutant);
    add(control_report("control_tie_rule_mutant", !tie.ok(),
                       "tie-stopping rule was not flagged by the dominance check"));

    SyntheticTaskMdp dip = fixtures::dip_and_recover();
    auto witness = certify_no_recovery(dip, dip.pi, 3, 0.5);
    add(control_report("control_recovery_certificate", witness.has_value(),
                       "recovering fixture was certified as absorbing"));

    auto source = make_oracle_source(dip, dip.pi, 0.0);
    std::vector<RolloutTrace> traces;
    for (auto& [tr, p] : enumerate_traces(dip, dip.pi, *source, 0)) traces.push_back(tr);
    auto cells = robustness_monotone(traces, {0.5}, {negation_transform()},
                                     SelectionMethod::kDynamicMin, 1, true);
    bool changed = false;
    for (const auto& cell : cells) changed = changed || !cell.identical_selection;
    add(control_report("control_negation_transform", changed,
                       "negated values selected the same samples"));
  }

  std::vector<TheoremReport> reports;
  bool ok = true;
  for (auto& [name, rep] : merged) {
    reports.push_back(rep);
    ok = ok && rep.ok();
    std::cout << name << ": checks=" << rep.checks << " strict=" << rep.strict_cases
              << " equality=" << rep.equality_cases << " skipped=" << rep.skipped
              << " violations=" << rep.violations.size() << "\n";
  }
  write_theorem_reports_json(out, reports);
  std::cout << "theorem_report: " << out << "\n";
  if (!ok) std::cerr << "verification FAILED, see " << out << "\n";
  return ok ? 0 : 1;
}

// --------------------------------------------------------------- calibrate

int cmd_calibrate(const KeyValueConfig& cfg) {
  SyntheticTaskMdp mdp = mdp_from(cfg);
  double beta = cfg.get_double("beta", 0.0);
  double r_bot = cfg.get_double("r_bot", 0.5);
  int64_t n_traj = cfg.get_int("n_traj", 1000);
  int32_t n_splits = static_cast<int32_t>(cfg.get_int("n_splits", 20));
  std::vector<double> alphas = alphas_from(cfg);
  std::vector<uint64_t> seeds = seeds_from(cfg);
  ValueChoice values = values_from(cfg, mdp, beta);
  std::string table_out = output_path(cfg.get_string("calibration_out", "calibration.csv"));
  std::string transfer_out =
      output_path(cfg.get_string("transfer_out", "split_transfer.csv"));
  cfg.finish();

  std::vector<RolloutTrace> pooled;
  std::vector<SplitTransferResult> sums(alphas.size());
  for (uint64_t seed : seeds) {
    Rng rng(derive_seed(seed, "calibrate"));
    std::vector<RolloutTrace> traces =
        collect_traces(mdp, mdp.pi, *values.source, n_traj, rng);
    Rng split_rng(derive_seed(seed, "calibrate-splits"));
    auto results =
        cross_split_check(per_sample_min_values(traces), alphas, n_splits, split_rng);
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      sums[a].alpha_target = results[a].alpha_target;
      sums[a].mean_achieved += results[a].mean_achieved;
      sums[a].mae_splits += results[a].mae_splits;
      sums[a].abs_bias += results[a].abs_bias;
      sums[a].n_splits += results[a].n_splits;
    }
    pooled.insert(pooled.end(), traces.begin(), traces.end());
  }
  double n_seeds = static_cast<double>(seeds.size());
  for (auto& row : sums) {
    row.mean_achieved /= n_seeds;
    row.mae_splits /= n_seeds;
    row.abs_bias /= n_seeds;
  }
  write_split_transfer_csv(transfer_out, sums);

  auto reports = evaluate_rate_targeted(pooled, SelectionMethod::kDynamicMin, 1, alphas,
                                        r_bot, seeds.front());
  std::vector<CalibrationRow> table;
  for (const auto& rep : reports)
    table.push_back(CalibrationRow{rep.alpha_target, rep.threshold, rep.alpha_achieved,
                                   rep.r_hat_bot, rep.r_hat_excluded});
  write_calibration_csv(table_out, table);

  double worst_mae = 0.0;
  for (const auto& row : sums) worst_mae = std::max(worst_mae, row.mae_splits);
  std::cout << "calibration: " << table_out << "\n"
            << "split_transfer: " << transfer_out << "\n"
            << "worst seed-averaged split MAE: " << worst_mae << "\n";
  return 0;
}

// -------------------------------------------------------------- robustness

int cmd_robustness(const KeyValueConfig& cfg) {
  SyntheticTaskMdp mdp = mdp_from(cfg);
  double beta = cfg.get_double("beta", 0.0);
  int64_t n_traj = cfg.get_int("n_traj", 2000);
  int32_t n_reps = static_cast<int32_t>(cfg.get_int("n_reps", 20));
  uint64_t seed = cfg.get_uint("seed", 42);
  std::vector<double> alphas = alphas_from(cfg);
  std::vector<double> sigma_mults =
      cfg.get_double_list("sigma_mults", {0.0, 0.5, 1.0, 2.0, 5.0, 10.0});
  ValueChoice values = values_from(cfg, mdp, beta);
  std::string monotone_out = output_path(cfg.get_string("monotone_out", "monotone.csv"));
  std::string noise_out = output_path(cfg.get_string("noise_out", "noise.csv"));
  cfg.finish();

  Rng rng(derive_seed(seed, "robustness"));
  std::vector<RolloutTrace> traces = collect_traces(mdp, mdp.pi, *values.source, n_traj, rng);

  auto cells = robustness_monotone(traces, alphas, standard_monotone_transforms());
  bool invariant = true;
  for (const auto& cell : cells)
    invariant = invariant && cell.identical_selection && cell.bitwise_equal_selective;
  write_monotone_cells_csv(monotone_out, cells);

  auto negation = robustness_monotone(traces, alphas, {negation_transform()},
                                      SelectionMethod::kDynamicMin, 1, true);
  bool negation_differs = false;
  for (const auto& cell : negation)
    negation_differs = negation_differs || !cell.identical_selection;

  auto noise = robustness_noise(traces, sigma_mults, alphas, n_reps, seed);
  write_noise_cells_csv(noise_out, noise);

  std::cout << "monotone: " << monotone_out << " (" << cells.size() << " cells, "
            << (invariant ? "selection invariant" : "INVARIANCE BROKEN") << ")\n"
            << "negation control: "
            << (negation_differs ? "selection changed as expected"
                                 : "selection UNCHANGED (control failed)")
            << "\n"
            << "noise: " << noise_out << " (" << noise.size() << " cells)\n";
  return invariant && negation_differs ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-task abstention toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  struct Sub {
    const char* name;
    const char* blurb;
    int (*run)(const KeyValueConfig&);
  };
  const Sub subs[] = {
      {"generate", "build a random task and sample a trajectory dataset", cmd_generate},
      {"train", "fit a value probe on a trajectory dataset", cmd_train},
      {"evaluate", "rate-targeted abstention sweep over methods", cmd_evaluate},
      {"verify", "randomized guarantee sweep plus negative controls", cmd_verify},
      {"calibrate", "threshold table and cross-split transfer check", cmd_calibrate},
      {"robustness", "monotone-transform and noise sweeps", cmd_robustness},
  };
  for (const Sub& sub : subs) {
    CLI::App* cmd = app.add_subcommand(sub.name, sub.blurb);
    cmd->add_option("-c,--config", config_path, "key = value config file");
    cmd->add_option("overrides", overrides, "key=value overrides");
    cmd->callback([&overrides, &config_path, run = sub.run] {
      KeyValueConfig cfg = load_config(config_path, overrides);
      int rc = run(cfg);
      if (rc != 0) throw CLI::RuntimeError(rc);
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const dynabs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <string>
#include <vector>

#include "dynabs/abstention.hpp"
#include "dynabs/calibration.hpp"
#include "dynabs/estimator.hpp"
#include "dynabs/evaluation.hpp"
#include "dynabs/fixtures.hpp"
#include "dynabs/mdp.hpp"
#include "dynabs/value.hpp"

namespace py = pybind11;
using namespace dynabs;

namespace {

State make_state(const SyntheticTaskMdp& mdp, PromptId prompt,
                 const std::vector<TokenId>& prefix) {
  if (prompt < 0 || prompt >= static_cast<PromptId>(mdp.prompts.size()))
    throw Error("prompt index out of range");
  return State{mdp.prompts[static_cast<std::size_t>(prompt)], prefix};
}

AbstentionRule rule_of(const std::string& method, double r_bot, int32_t k) {
  if (method == "none") return AbstentionRule{};
  if (method == "dynamic") return dynamic_rule(r_bot);
  if (method == "fixed") return fixed_position_rule(r_bot, k);
  throw Error("method must be none, dynamic, or fixed");
}

double objective(const SyntheticTaskMdp& mdp, const std::string& method, double beta,
                 double r_bot, int32_t k) {
  AbstentionRule rule = rule_of(method, r_bot, k);
  auto values = make_oracle_source(mdp, mdp.pi, beta);
  EvaluatedPolicy policy{&mdp.pi, rule, values.get()};
  return exact_objective(mdp, policy, beta);
}

std::vector<Trajectory> sample_trajectories(const SyntheticTaskMdp& mdp, int64_t n,
                                            uint64_t seed) {
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "trajectory", static_cast<uint64_t>(i)));
    out.push_back(sample_trajectory(mdp, mdp.pi, rng));
  }
  return out;
}

std::vector<RolloutTrace> oracle_traces(const SyntheticTaskMdp& mdp, int64_t n,
                                        uint64_t seed, double beta) {
  auto values = make_oracle_source(mdp, mdp.pi, beta);
  Rng rng(seed);
  return collect_traces(mdp, mdp.pi, *values, n, rng);
}

std::vector<EvalReport> evaluate(const std::vector<RolloutTrace>& traces,
                                 const std::string& method, int32_t k,
                                 const std::vector<double>& alphas, double r_bot,
                                 uint64_t seed) {
  SelectionMethod m = method == "dynamic"  ? SelectionMethod::kDynamicMin
                      : method == "fixed"  ? SelectionMethod::kFixedPosition
                                           : throw Error("method must be dynamic or fixed");
  return evaluate_rate_targeted(traces, m, k, alphas, r_bot, seed);
}

std::vector<TheoremReport> verify_all(const SyntheticTaskMdp& mdp, double beta,
                                      double r_bot) {
  std::vector<TheoremReport> reports;
  reports.push_back(verify_value_dominance(mdp, beta, r_bot));
  reports.push_back(verify_objective_dominance(mdp, beta, r_bot));
  reports.push_back(verify_oracle_equivalence(mdp, beta, r_bot));
  if (beta == 0.0) {
    reports.push_back(verify_optimal_abstention(mdp, r_bot));
    reports.push_back(verify_binary_gap_bound(mdp, r_bot));
  }
  for (int32_t k = 1; k < mdp.horizon; ++k) {
    reports.push_back(verify_fixed_position_gap(mdp, beta, r_bot, k));
    reports.push_back(verify_corollaries(mdp, beta, r_bot, k));
  }
  return reports;
}

Probe train(const SyntheticTaskMdp& mdp, const std::vector<Trajectory>& trajs,
            const std::string& loss, const std::string& features, double beta,
            int32_t hidden_dim, double learning_rate, int32_t epochs,
            int32_t batch_size, uint64_t seed) {
  TrainingSet set = build_training_set(
      mdp, trajs, beta == 0.0 ? LabelKind::kTerminalReward : LabelKind::kKlAdjustedReturn,
      beta);
  FeatureMap fmap = features == "tabular"      ? FeatureMap::tabular(mdp)
                    : features == "engineered" ? FeatureMap::engineered(mdp)
                                               : throw Error("features must be tabular or engineered");
  LossKind kind = loss == "bce"   ? LossKind::kBce
                  : loss == "mse" ? LossKind::kMse
                                  : throw Error("loss must be bce or mse");
  ProbeConfig config;
  config.hidden_dim = hidden_dim;
  config.learning_rate = learning_rate;
  config.epochs = epochs;
  config.batch_size = batch_size;
  config.seed = seed;
  return train_probe(mdp, std::move(fmap), set, kind, config, nullptr);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Value-thresholded abstention on finite-horizon token MDPs";

  py::register_exception<Error>(m, "DynabsError");

  py::class_<GeneratorConfig>(m, "GeneratorConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &GeneratorConfig::vocab_size)
      .def_readwrite("horizon", &GeneratorConfig::horizon)
      .def_readwrite("num_prompts", &GeneratorConfig::num_prompts)
      .def_readwrite("reward_density", &GeneratorConfig::reward_density)
      .def_readwrite("concentration", &GeneratorConfig::concentration)
      .def_readwrite("independent_ref", &GeneratorConfig::independent_ref)
      .def_readwrite("binary_rewards", &GeneratorConfig::binary_rewards)
      .def_readwrite("seed", &GeneratorConfig::seed)
      .def_readwrite("node_budget", &GeneratorConfig::node_budget);

  py::class_<SyntheticTaskMdp>(m, "Mdp")
      .def_property_readonly("horizon", [](const SyntheticTaskMdp& mdp) { return mdp.horizon; })
      .def_property_readonly("vocab_size",
                             [](const SyntheticTaskMdp& mdp) { return mdp.vocab.size; })
      .def_property_readonly("num_prompts",
                             [](const SyntheticTaskMdp& mdp) { return mdp.prompts.size(); })
      .def("save", &save_mdp, py::arg("path"))
      .def_static("load", &load_mdp, py::arg("path"));

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("prompt", &Trajectory::prompt)
      .def_readonly("tokens", &Trajectory::tokens)
      .def_readonly("completion_time", &Trajectory::completion_time)
      .def_readonly("reward", &Trajectory::reward)
      .def_readonly("log_prob", &Trajectory::log_prob)
      .def_readonly("log_prob_ref", &Trajectory::log_prob_ref);

  py::class_<RolloutTrace>(m, "RolloutTrace")
      .def_readonly("prompt", &RolloutTrace::prompt)
      .def_readonly("tokens", &RolloutTrace::tokens)
      .def_readonly("completion_time", &RolloutTrace::completion_time)
      .def_readonly("reward", &RolloutTrace::reward)
      .def_readonly("values", &RolloutTrace::values);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("method", &EvalReport::method)
      .def_readonly("alpha_target", &EvalReport::alpha_target)
      .def_readonly("alpha_achieved", &EvalReport::alpha_achieved)
      .def_readonly("threshold", &EvalReport::threshold)
      .def_readonly("r_hat_bot", &EvalReport::r_hat_bot)
      .def_readonly("r_hat_excluded", &EvalReport::r_hat_excluded)
      .def_readonly("selective", &EvalReport::selective)
      .def_readonly("j_calibrated", &EvalReport::j_calibrated)
      .def_readonly("precision", &EvalReport::precision)
      .def_readonly("mean_tau", &EvalReport::mean_tau)
      .def_readonly("median_tau", &EvalReport::median_tau)
      .def_readonly("mean_tau_over_c", &EvalReport::mean_tau_over_c)
      .def_readonly("token_savings_ratio", &EvalReport::token_savings_ratio)
      .def_readonly("n", &EvalReport::n)
      .def_readonly("n_abstained", &EvalReport::n_abstained)
      .def("__repr__", [](const EvalReport& r) {
        return "<EvalReport " + r.method + " alpha=" + std::to_string(r.alpha_target) +
               " S=" + std::to_string(r.selective) + ">";
      });

  py::class_<TheoremReport>(m, "TheoremReport")
      .def_readonly("theorem", &TheoremReport::theorem)
      .def_readonly("checks", &TheoremReport::checks)
      .def_readonly("strict_cases", &TheoremReport::strict_cases)
      .def_readonly("equality_cases", &TheoremReport::equality_cases)
      .def_readonly("skipped", &TheoremReport::skipped)
      .def_readonly("violations", &TheoremReport::violations)
      .def("ok", &TheoremReport::ok);

  py::class_<Probe>(m, "Probe")
      .def("predict",
           [](const Probe& probe, const SyntheticTaskMdp& mdp, PromptId prompt,
              const std::vector<TokenId>& prefix) {
             return probe.predict(mdp, make_state(mdp, prompt, prefix));
           },
           py::arg("mdp"), py::arg("prompt"), py::arg("prefix"))
      .def("save", &save_probe, py::arg("path"))
      .def_static("load", &load_probe, py::arg("path"));

  m.def("build_random_mdp", &build_random_mdp, py::arg("config"));
  m.def("two_branch_toy", &fixtures::two_branch_toy);
  m.def("dip_and_recover", &fixtures::dip_and_recover);
  m.def("staged_reveal_default", &fixtures::staged_reveal_default);

  m.def("value",
        [](const SyntheticTaskMdp& mdp, PromptId prompt, const std::vector<TokenId>& prefix,
           double beta) {
          return exact_value(mdp, plain_policy(mdp.pi), beta,
                             make_state(mdp, prompt, prefix));
        },
        py::arg("mdp"), py::arg("prompt"), py::arg("prefix"), py::arg("beta") = 0.0,
        "Exact expected remaining reward at (prompt, prefix) under the base policy.");
  m.def("objective", &objective, py::arg("mdp"), py::arg("method") = "none",
        py::arg("beta") = 0.0, py::arg("r_bot") = 0.0, py::arg("k") = 1,
        "Exact rho-weighted objective with oracle values driving the rule.");
  m.def("max_completion_reward", &max_completion_reward, py::arg("mdp"), py::arg("prompt"));

  m.def("sample_trajectories", &sample_trajectories, py::arg("mdp"), py::arg("n"),
        py::arg("seed"));
  m.def("collect_traces", &oracle_traces, py::arg("mdp"), py::arg("n"), py::arg("seed"),
        py::arg("beta") = 0.0,
        "Sample rollouts annotated with oracle values after each token.");

  m.def("abstention_time", &abstention_time, py::arg("values"), py::arg("threshold"),
        "First 1-based position whose value falls below the threshold, or None.");
  m.def("quantile_threshold", &quantile_threshold, py::arg("values"), py::arg("alpha"));
  m.def("evaluate", &evaluate, py::arg("traces"), py::arg("method") = "dynamic",
        py::arg("k") = 1, py::arg("alphas") = std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5,
                                                                  0.6, 0.7, 0.8, 0.9},
        py::arg("r_bot") = 0.5, py::arg("seed") = 0,
        "Rate-targeted sweep: one report per alpha.");

  m.def("verify_all", &verify_all, py::arg("mdp"), py::arg("beta") = 0.0,
        py::arg("r_bot") = 0.5, "Run every guarantee checker against the instance.");
  m.def("certify_no_recovery",
        [](const SyntheticTaskMdp& mdp, int32_t k, double r_bot, double beta) {
          return certify_no_recovery(mdp, mdp.pi, k, r_bot, beta);
        },
        py::arg("mdp"), py::arg("k"), py::arg("r_bot"), py::arg("beta") = 0.0,
        "None when position-k stopping is provably safe, else a witness path.");

  m.def("train_probe", &train, py::arg("mdp"), py::arg("trajectories"),
        py::arg("loss") = "bce", py::arg("features") = "tabular", py::arg("beta") = 0.0,
        py::arg("hidden_dim") = 16, py::arg("learning_rate") = 0.1, py::arg("epochs") = 200,
        py::arg("batch_size") = 32, py::arg("seed") = 0);
}

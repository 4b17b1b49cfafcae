#pragma once

#include <functional>
#include <limits>
#include <optional>

#include "dynabs/abstention.hpp"
#include "dynabs/calibration.hpp"
#include "dynabs/estimator.hpp"
#include "dynabs/value.hpp"

namespace dynabs {

// How the per-sample abstention statistic is formed when calibrating a
// threshold post hoc on a pool of traces.
//
//   kDynamicMin:     min over the per-position value estimates; the sample
//                    abstains at the first position whose estimate drops
//                    below the threshold.
//   kFixedPosition:  the estimate at position k only; samples that finish
//                    in fewer than k tokens never abstain (their statistic
//                    is +infinity, so no finite threshold reaches them).
enum class SelectionMethod { kDynamicMin, kFixedPosition };

std::string selection_method_name(SelectionMethod method, int32_t k);

// One trace pushed through a threshold rule.
struct SampleOutcome {
  bool abstained = false;
  int32_t tau = 0;              // 1-based stop position; meaningful iff abstained
  double realized = 0.0;        // fallback reward if abstained, else terminal reward
  double counterfactual_reward = 0.0;  // terminal reward of the uninterrupted rollout
  int32_t c = 0;                // uninterrupted completion length
  double crossing_value = 0.0;  // statistic that was compared against the threshold
  double weight = 1.0;          // probability mass (exact protocol) or 1 (sampled)
};

double sample_statistic(const RolloutTrace& trace, SelectionMethod method, int32_t k);

SampleOutcome apply_threshold(const RolloutTrace& trace, SelectionMethod method,
                              int32_t k, double threshold, double r_bot,
                              double weight = 1.0);

std::vector<SampleOutcome> apply_threshold(const std::vector<RolloutTrace>& traces,
                                           SelectionMethod method, int32_t k,
                                           double threshold, double r_bot);

// One operating point of a rate-targeted sweep.
struct EvalReport {
  std::string method;
  double alpha_target = std::numeric_limits<double>::quiet_NaN();
  double alpha_achieved = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  double r_hat_bot = std::numeric_limits<double>::quiet_NaN();
  bool r_hat_excluded = false;  // the isotonic boundary estimate hit 1 and was dropped
  double selective = std::numeric_limits<double>::quiet_NaN();  // accuracy on kept samples
  double objective = 0.0;       // mean realized reward, fallback included
  double j_calibrated = std::numeric_limits<double>::quiet_NaN();
  double precision = std::numeric_limits<double>::quiet_NaN();  // P(wrong | abstained)
  double mean_tau = std::numeric_limits<double>::quiet_NaN();
  double median_tau = std::numeric_limits<double>::quiet_NaN();
  double mean_tau_over_c = std::numeric_limits<double>::quiet_NaN();
  double token_savings_ratio = std::numeric_limits<double>::quiet_NaN();
  double n = 0.0;           // total weight
  double n_abstained = 0.0; // abstained weight
  uint64_t seed = 0;
};

// Aggregates a pool of thresholded outcomes. r_bot is only used for the
// objective identity (realized rewards already carry it).
EvalReport compute_metrics(const std::vector<SampleOutcome>& outcomes, double r_bot);

// Rate-targeted sweep on a sampled pool: for each target rate the threshold
// is the empirical quantile of the per-sample statistics, then every report
// field is computed on the same pool. The calibrated fallback estimate comes
// from an isotonic fit of correctness against the statistic, read off at the
// threshold (dynamic: abstained samples keyed by their crossing value;
// fixed position: all surviving samples keyed by their position-k estimate).
std::vector<EvalReport> evaluate_rate_targeted(const std::vector<RolloutTrace>& traces,
                                               SelectionMethod method, int32_t k,
                                               const std::vector<double>& alphas,
                                               double r_bot, uint64_t seed);

// Same sweep on an exhaustive weighted pool (every trajectory with its exact
// probability). Thresholds come from the weighted quantile, so the achieved
// rates are exact probabilities rather than sample frequencies.
std::vector<EvalReport> evaluate_rate_targeted_exact(
    const std::vector<RolloutTrace>& traces, const std::vector<double>& weights,
    SelectionMethod method, int32_t k, const std::vector<double>& alphas, double r_bot);

void write_eval_reports_csv(const std::string& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_eval_reports_csv(const std::string& path);

// Outcome of checking one guarantee on one configuration. `checks` counts
// elementary comparisons; a violation records the failing comparison.
struct TheoremReport {
  std::string theorem;
  int64_t checks = 0;
  int64_t strict_cases = 0;    // comparisons where strict improvement was required and held
  int64_t equality_cases = 0;  // comparisons where exact equality was required and held
  int64_t skipped = 0;         // comparisons whose hypothesis was not satisfied
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
  void merge(const TheoremReport& other);
};

// Per-state value dominance of the abstention-augmented policy: at every
// reachable non-terminal state the augmented value is >= max(r_bot, V), with
// equality exactly when no state reachable from there (itself included) has
// value below r_bot, and strict improvement otherwise. `rule_override`
// substitutes a different stopping rule (used to show that a rule which also
// stops on ties loses the strict half).
TheoremReport verify_value_dominance(const SyntheticTaskMdp& mdp, double beta,
                                     double r_bot,
                                     const AbstentionRule* rule_override = nullptr);

// Objective-level dominance: J(augmented) >= max(r_bot, J(base)), strict over
// J(base) exactly when some reachable non-terminal state sits below r_bot.
TheoremReport verify_objective_dominance(const SyntheticTaskMdp& mdp, double beta,
                                         double r_bot);

// Dynamic-vs-fixed-position gap: J(dynamic) >= J(fixed at k) minus the
// expected clipped surplus (V - r_bot)+ at position k of paths that already
// crossed earlier, with strictness exactly when some path is clean before k
// but crosses at or after k.
TheoremReport verify_fixed_position_gap(const SyntheticTaskMdp& mdp, double beta,
                                        double r_bot, int32_t k);

// The two specializations with checkable hypotheses: no early crossing
// (surplus term vanishes) and absorbing sub-threshold states (no recovery
// certificate). Configurations whose hypothesis fails are counted as skipped.
TheoremReport verify_corollaries(const SyntheticTaskMdp& mdp, double beta,
                                 double r_bot, int32_t k);

// With no KL term, the augmented optimum equals the prompt-wise
// max(r_bot, best achievable reward) in closed form.
TheoremReport verify_optimal_abstention(const SyntheticTaskMdp& mdp, double r_bot);

// Binary-reward gap bound: J(augmented) - J(base) <= alpha1 * r_bot +
// (alpha - alpha1) * L where alpha is the abstention probability, alpha1 the
// probability of abstaining at the empty prefix, and L the one-step value
// Lipschitz constant. Skipped when rewards are not 0/1.
TheoremReport verify_binary_gap_bound(const SyntheticTaskMdp& mdp, double r_bot);

// Cross-checks the recursive evaluator against exhaustive enumeration for
// the base and augmented policies, and both against the stopping-rule form
// (walk the base trajectory, swap in the fallback the first time the value
// dips below r_bot).
TheoremReport verify_oracle_equivalence(const SyntheticTaskMdp& mdp, double beta,
                                        double r_bot);

std::string theorem_reports_to_json(const std::vector<TheoremReport>& reports);
void write_theorem_reports_json(const std::string& path,
                                const std::vector<TheoremReport>& reports);

// Strictly increasing reshapings of the value scale used by the invariance
// check, plus one deliberately decreasing control.
struct ValueTransform {
  std::string name;
  std::function<double(double)> fn;
};
std::vector<ValueTransform> standard_monotone_transforms();
ValueTransform negation_transform();

// One (transform, target rate) cell of the invariance check. The selection
// must be identical sample-for-sample and the kept-set accuracy must be
// bit-for-bit equal to the untransformed run.
struct MonotoneCheckCell {
  std::string transform;
  double alpha_target = 0.0;
  double selective_base = 0.0;
  double selective_transformed = 0.0;
  int64_t selection_diff = 0;  // samples whose abstain decision changed
  bool identical_selection = false;
  bool bitwise_equal_selective = false;
};

// Applies each transform to every value estimate, recalibrates the threshold
// at each target rate, and compares selections against the untransformed
// pipeline. Throws if a transform is not strictly increasing on the observed
// values unless allow_non_monotone is set (the negation control needs it).
std::vector<MonotoneCheckCell> robustness_monotone(
    const std::vector<RolloutTrace>& traces, const std::vector<double>& alphas,
    const std::vector<ValueTransform>& transforms,
    SelectionMethod method = SelectionMethod::kDynamicMin, int32_t k = 1,
    bool allow_non_monotone = false);

// One (noise multiplier, target rate) cell, aggregated over repetitions.
struct NoiseCheckCell {
  double sigma_mult = 0.0;
  double alpha_target = 0.0;
  std::vector<double> per_rep_selective;
  double mean_selective = 0.0;
  double median_selective = 0.0;
};

// Perturbs every value estimate with centered Gaussian noise whose scale is
// sigma_mult times the standard deviation of the per-sample minimum values,
// then re-runs threshold calibration and selection per repetition. The zero
// multiplier reproduces the clean pipeline exactly.
std::vector<NoiseCheckCell> robustness_noise(const std::vector<RolloutTrace>& traces,
                                             const std::vector<double>& sigma_mults,
                                             const std::vector<double>& alphas,
                                             int32_t n_reps, uint64_t seed);

void write_monotone_cells_csv(const std::string& path,
                              const std::vector<MonotoneCheckCell>& cells);
void write_noise_cells_csv(const std::string& path,
                           const std::vector<NoiseCheckCell>& cells);

// Token accounting between two outcome pools over the same traces: tokens
// saved = sum of weight * (c - tokens generated), where an abstention at tau
// generates tau - 1 tokens. The ratio a/b is undefined when b saves nothing.
struct TokenSavings {
  double saved_a = 0.0;
  double saved_b = 0.0;
  double ratio = std::numeric_limits<double>::quiet_NaN();
  bool ratio_defined = false;
};
TokenSavings token_savings(const std::vector<SampleOutcome>& a,
                           const std::vector<SampleOutcome>& b);

}  // namespace dynabs

#pragma once

#include <map>

#include "dynabs/abstention.hpp"
#include "dynabs/mdp.hpp"

namespace dynabs {

enum class FeatureMode { kTabular, kEngineered };

// Deterministic featurization of non-terminal states. Tabular mode one-hot
// encodes every reachable non-terminal state (value functions become exactly
// representable); engineered mode compresses to prompt, position, last token
// and a running token histogram, deliberately losing information.
class FeatureMap {
 public:
  FeatureMap() = default;  // empty map; fill via tabular()/engineered()
  static FeatureMap tabular(const SyntheticTaskMdp& mdp);
  static FeatureMap engineered(const SyntheticTaskMdp& mdp);

  FeatureMode mode() const { return mode_; }
  int32_t dim() const { return dim_; }
  std::vector<double> features(const SyntheticTaskMdp& mdp, const State& s) const;

  // JSON fragment round-trip, embedded in probe files.
  std::string to_json() const;
  static FeatureMap from_json(const std::string& text);

 private:
  FeatureMode mode_ = FeatureMode::kTabular;
  int32_t dim_ = 0;
  std::map<State, int32_t> index_;  // tabular
  int32_t num_prompts_ = 0, vocab_size_ = 0, horizon_ = 0;  // engineered
};

enum class LabelKind { kTerminalReward, kKlAdjustedReturn };

struct TrainingRecord {
  State state;
  double label = 0.0;
};

struct TrainingSet {
  std::vector<TrainingRecord> records;
};

// One record per prefix position 0..c-1 of every trajectory, all carrying
// that trajectory's terminal label (reward, or KL-adjusted return for
// beta > 0).
TrainingSet build_training_set(const SyntheticTaskMdp& mdp,
                               const std::vector<Trajectory>& trajectories,
                               LabelKind kind = LabelKind::kTerminalReward,
                               double beta = 0.0);

TrainingSet filter_by_position(const TrainingSet& set, int32_t position);

void write_training_set_csv(const std::string& path, const TrainingSet& set);
TrainingSet read_training_set_csv(const std::string& path);

// Per-state empirical mean label, the Bayes-optimal tabular predictor.
std::map<State, double> tabular_bayes_oracle(const TrainingSet& set);
std::map<State, int64_t> state_record_counts(const TrainingSet& set);

enum class LossKind { kBce, kMse };

struct ProbeConfig {
  int32_t hidden_dim = 16;
  double learning_rate = 0.1;  // 0.01 recommended for engineered features
  int32_t epochs = 200;
  int32_t batch_size = 32;
  uint64_t seed = 0;
};

// Two-layer perceptron with tanh hidden units and a sigmoid output head.
struct Probe {
  FeatureMap fmap;
  LossKind loss = LossKind::kBce;
  ProbeConfig config;
  int32_t input_dim = 0;
  int32_t hidden_dim = 0;
  std::vector<double> w1;  // hidden x input, row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  double b2 = 0.0;

  double forward(const std::vector<double>& x) const;
  // Exactly 0 at terminal states, sigmoid output (strictly inside (0,1))
  // elsewhere.
  double predict(const SyntheticTaskMdp& mdp, const State& s) const;
};

class ProbeValueSource final : public ValueSource {
 public:
  ProbeValueSource(const SyntheticTaskMdp& mdp, const Probe& probe)
      : mdp_(&mdp), probe_(&probe) {}
  double value(const State& s) const override { return probe_->predict(*mdp_, s); }

 private:
  const SyntheticTaskMdp* mdp_;
  const Probe* probe_;
};

struct TrainReport {
  double final_loss = 0.0;
  int32_t epochs = 0;
  int64_t n_records = 0;
  std::vector<double> epoch_losses;  // full-set loss after each epoch
};

// Plain mini-batch gradient descent on the empirical loss; symmetric uniform
// init scaled by 1/sqrt(fan-in); deterministic in (set, config). BCE clamps
// predictions to [1e-6, 1-1e-6] inside the loss only and requires labels in
// [0,1].
Probe train_probe(const SyntheticTaskMdp& mdp, FeatureMap fmap, const TrainingSet& set,
                  LossKind loss, const ProbeConfig& config, TrainReport* report = nullptr);

inline Probe train_probe_bce(const SyntheticTaskMdp& mdp, FeatureMap fmap,
                             const TrainingSet& set, const ProbeConfig& config,
                             TrainReport* report = nullptr) {
  return train_probe(mdp, std::move(fmap), set, LossKind::kBce, config, report);
}
inline Probe train_probe_mse(const SyntheticTaskMdp& mdp, FeatureMap fmap,
                             const TrainingSet& set, const ProbeConfig& config,
                             TrainReport* report = nullptr) {
  return train_probe(mdp, std::move(fmap), set, LossKind::kMse, config, report);
}

// Flattened parameter vector (w1, b1, w2, b2) for optimization utilities.
std::vector<double> flatten_params(const Probe& probe);
void unflatten_params(Probe& probe, const std::vector<double>& params);

// Mean loss and its analytic parameter gradient over a featurized batch.
double batch_loss(const Probe& probe, const std::vector<std::vector<double>>& xs,
                  const std::vector<double>& ys, LossKind loss);
std::vector<double> batch_loss_gradient(const Probe& probe,
                                        const std::vector<std::vector<double>>& xs,
                                        const std::vector<double>& ys, LossKind loss);

// Largest relative error between the analytic gradient and central finite
// differences at `n_points` random parameter settings.
double gradient_check(const SyntheticTaskMdp& mdp, const FeatureMap& fmap,
                      const TrainingSet& set, LossKind loss, int32_t n_points,
                      double fd_step, uint64_t seed);

// Probe JSON round-trip (schema version 1).
std::string probe_to_json(const Probe& probe);
Probe probe_from_json(const std::string& text);
void save_probe(const Probe& probe, const std::string& path);
Probe load_probe(const std::string& path);

}  // namespace dynabs

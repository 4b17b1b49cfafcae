#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dynabs/calibration.hpp"
#include "dynabs/estimator.hpp"
#include "dynabs/mdp.hpp"

namespace dynabs {

// Flat key = value configuration, '#' starts a comment. Every key must be
// consumed by a getter before finish(); unknown keys are typos and rejected.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_text(const std::string& text, const std::string& origin = "<text>");
  static KeyValueConfig parse_file(const std::string& path);

  // Inserts or replaces a key (command-line overrides).
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  uint64_t get_uint(const std::string& key, uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated doubles.
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  // Throws if any key was never consumed.
  void finish() const;

 private:
  std::string origin_;
  std::map<std::string, std::string> entries_;
  mutable std::set<std::string> consumed_;
};

// Reads the generator keys (vocab_size, horizon, num_prompts, reward_density,
// concentration, independent_ref, binary_rewards, seed, node_budget), leaving
// unrelated keys untouched.
GeneratorConfig generator_config_from(const KeyValueConfig& cfg);

// Reads the probe keys (hidden_dim, learning_rate, epochs, batch_size,
// probe_seed).
ProbeConfig probe_config_from(const KeyValueConfig& cfg);

// Output files land under this root; set DYNABS_OUT_ROOT to redirect. The
// directory is created on demand.
std::string output_root();
std::string output_path(const std::string& relative);

// One row of the threshold-calibration table.
struct CalibrationRow {
  double alpha_target = 0.0;
  double threshold = 0.0;
  double achieved_rate = 0.0;
  double r_hat_bot = 0.0;
  bool excluded = false;
};

void write_calibration_csv(const std::string& path, const std::vector<CalibrationRow>& rows);
std::vector<CalibrationRow> read_calibration_csv(const std::string& path);

void write_split_transfer_csv(const std::string& path,
                              const std::vector<SplitTransferResult>& rows);

}  // namespace dynabs

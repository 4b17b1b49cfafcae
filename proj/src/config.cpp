#include "dynabs/config.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dynabs {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_text(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw Error(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.entries_.count(key))
      throw Error(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.entries_[key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

bool KeyValueConfig::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  return it->second;
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  try {
    std::size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "' expects an integer, got '" + it->second + "'");
  }
}

uint64_t KeyValueConfig::get_uint(const std::string& key, uint64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  try {
    std::size_t pos = 0;
    uint64_t v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "' expects an unsigned integer, got '" + it->second +
                "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  try {
    std::size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<double> KeyValueConfig::get_double_list(
    const std::string& key, const std::vector<double>& fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  consumed_.insert(key);
  std::vector<double> out;
  std::istringstream in(it->second);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(cell, &pos));
      if (pos != cell.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw Error("config key '" + key + "' expects comma-separated numbers, got '" +
                  it->second + "'");
    }
  }
  if (out.empty())
    throw Error("config key '" + key + "' expects comma-separated numbers, got '" +
                it->second + "'");
  return out;
}

void KeyValueConfig::finish() const {
  for (const auto& [key, value] : entries_) {
    if (!consumed_.count(key))
      throw Error(origin_ + ": unknown config key '" + key + "'");
  }
}

GeneratorConfig generator_config_from(const KeyValueConfig& cfg) {
  GeneratorConfig g;
  g.vocab_size = static_cast<int32_t>(cfg.get_int("vocab_size", g.vocab_size));
  g.horizon = static_cast<int32_t>(cfg.get_int("horizon", g.horizon));
  g.num_prompts = static_cast<int32_t>(cfg.get_int("num_prompts", g.num_prompts));
  g.reward_density = cfg.get_double("reward_density", g.reward_density);
  g.concentration = cfg.get_double("concentration", g.concentration);
  g.independent_ref = cfg.get_bool("independent_ref", g.independent_ref);
  g.binary_rewards = cfg.get_bool("binary_rewards", g.binary_rewards);
  g.seed = cfg.get_uint("seed", g.seed);
  g.node_budget = cfg.get_int("node_budget", g.node_budget);
  return g;
}

ProbeConfig probe_config_from(const KeyValueConfig& cfg) {
  ProbeConfig p;
  p.hidden_dim = static_cast<int32_t>(cfg.get_int("hidden_dim", p.hidden_dim));
  p.learning_rate = cfg.get_double("learning_rate", p.learning_rate);
  p.epochs = static_cast<int32_t>(cfg.get_int("epochs", p.epochs));
  p.batch_size = static_cast<int32_t>(cfg.get_int("batch_size", p.batch_size));
  p.seed = cfg.get_uint("probe_seed", p.seed);
  return p;
}

std::string output_root() {
  const char* env = std::getenv("DYNABS_OUT_ROOT");
  std::string root = env && *env ? env : ".";
  std::filesystem::create_directories(root);
  return root;
}

std::string output_path(const std::string& relative) {
  return (std::filesystem::path(output_root()) / relative).string();
}

void write_calibration_csv(const std::string& path, const std::vector<CalibrationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.calibration.v1\n";
  out << "alpha,T_alpha,achieved_rate,r_hat_bot,excluded\n";
  for (const auto& r : rows) {
    out << fmt(r.alpha_target) << ',' << fmt(r.threshold) << ',' << fmt(r.achieved_rate)
        << ',' << fmt(r.r_hat_bot) << ',' << (r.excluded ? 1 : 0) << '\n';
  }
}

std::vector<CalibrationRow> read_calibration_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# dynabs.calibration.v1")
    throw Error("calibration schema mismatch in " + path);
  if (!std::getline(in, line) || line != "alpha,T_alpha,achieved_rate,r_hat_bot,excluded")
    throw Error("calibration header mismatch in " + path);
  std::vector<CalibrationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw Error("malformed calibration row: " + line);
    CalibrationRow r;
    r.alpha_target = std::stod(cells[0]);
    r.threshold = std::stod(cells[1]);
    r.achieved_rate = std::stod(cells[2]);
    r.r_hat_bot = std::stod(cells[3]);
    r.excluded = cells[4] == "1";
    rows.push_back(r);
  }
  return rows;
}

void write_split_transfer_csv(const std::string& path,
                              const std::vector<SplitTransferResult>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "# dynabs.split_transfer.v1\n";
  out << "alpha_target,mean_achieved,mae_splits,abs_bias,n_splits\n";
  for (const auto& r : rows) {
    out << fmt(r.alpha_target) << ',' << fmt(r.mean_achieved) << ',' << fmt(r.mae_splits)
        << ',' << fmt(r.abs_bias) << ',' << r.n_splits << '\n';
  }
}

}  // namespace dynabs

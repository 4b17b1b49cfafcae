#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dynabs/config.hpp"

using namespace dynabs;

TEST_CASE("key=value parsing with comments, overrides, and typo rejection") {
  KeyValueConfig cfg = KeyValueConfig::parse_text(
      "# generator\n"
      "vocab_size = 4\n"
      "reward_density = 0.25\n"
      "binary_rewards = false\n"
      "alpha_grid = 0.1, 0.5, 0.9\n");
  CHECK(cfg.get_int("vocab_size", 0) == 4);
  CHECK(cfg.get_double("reward_density", 0.0) == 0.25);
  CHECK(cfg.get_bool("binary_rewards", true) == false);
  CHECK(cfg.get_double_list("alpha_grid", {}) == std::vector<double>{0.1, 0.5, 0.9});
  CHECK(cfg.get_int("missing", 7) == 7);
  cfg.finish();

  KeyValueConfig typo = KeyValueConfig::parse_text("vocabsize = 4\n");
  CHECK_THROWS_AS(typo.finish(), Error);

  KeyValueConfig overridden = KeyValueConfig::parse_text("seed = 1\n");
  overridden.set("seed", "9");
  CHECK(overridden.get_uint("seed", 0) == 9);
  overridden.finish();

  CHECK_THROWS_AS(KeyValueConfig::parse_text("malformed line\n"), Error);
  CHECK_THROWS_AS(KeyValueConfig::parse_text("x = y\n").get_int("x", 0), Error);
}

TEST_CASE("generator and probe configs read their keys") {
  KeyValueConfig cfg = KeyValueConfig::parse_text(
      "vocab_size = 4\nhorizon = 5\nseed = 3\nepochs = 17\nprobe_seed = 8\n");
  GeneratorConfig gen = generator_config_from(cfg);
  CHECK(gen.vocab_size == 4);
  CHECK(gen.horizon == 5);
  CHECK(gen.seed == 3);
  ProbeConfig probe = probe_config_from(cfg);
  CHECK(probe.epochs == 17);
  CHECK(probe.seed == 8);
  cfg.finish();
}

TEST_CASE("output root honors the environment override") {
  setenv("DYNABS_OUT_ROOT", "cli_test_out", 1);
  std::string path = output_path("x.csv");
  CHECK(path == "cli_test_out/x.csv");
  std::ofstream(path) << "probe\n";
  std::ifstream back(path);
  REQUIRE(back.good());
  unsetenv("DYNABS_OUT_ROOT");
  std::remove(path.c_str());
}

TEST_CASE("calibration csv round trip and schema guard") {
  std::vector<CalibrationRow> rows = {{0.1, 0.04, 0.11, 0.21, false},
                                      {0.5, 0.10, 0.49, 0.35, true}};
  std::string path = "calibration_test.csv";
  write_calibration_csv(path, rows);
  auto back = read_calibration_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].alpha_target == 0.1);
  CHECK(back[0].threshold == 0.04);
  CHECK(back[0].achieved_rate == 0.11);
  CHECK(back[0].r_hat_bot == 0.21);
  CHECK(!back[0].excluded);
  CHECK(back[1].excluded);

  std::ofstream tampered(path);
  tampered << "# dynabs.calibration.v9\nalpha\n";
  tampered.close();
  CHECK_THROWS_AS(read_calibration_csv(path), Error);
  std::remove(path.c_str());
}

#ifdef DYNABS_CLI_PATH

namespace {

int run_cli(const std::string& args, const std::string& out_root) {
  std::string cmd = "DYNABS_OUT_ROOT=" + out_root + " " + DYNABS_CLI_PATH + " " + args +
                    " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return status < 0 ? status : WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("cli: generate twice is byte-identical, horizon 1 is refused") {
  REQUIRE(run_cli("generate seed=11 horizon=4 num_prompts=2 n_traj=200", "cli_a") == 0);
  REQUIRE(run_cli("generate seed=11 horizon=4 num_prompts=2 n_traj=200", "cli_b") == 0);
  CHECK(slurp("cli_a/mdp.json") == slurp("cli_b/mdp.json"));
  CHECK(slurp("cli_a/trajectories.jsonl") == slurp("cli_b/trajectories.jsonl"));

  int lines = 0;
  std::istringstream traj(slurp("cli_a/trajectories.jsonl"));
  for (std::string line; std::getline(traj, line);) ++lines;
  CHECK(lines == 200);

  CHECK(run_cli("generate horizon=1", "cli_a") != 0);
  CHECK(run_cli("generate vocab_sise=3", "cli_a") != 0);  // typo rejected
}

TEST_CASE("cli: train writes the probe and loss curve, missing dataset fails") {
  REQUIRE(run_cli("train mdp=cli_a/mdp.json dataset=cli_a/trajectories.jsonl epochs=50",
                  "cli_a") == 0);
  CHECK(slurp("cli_a/train_loss.csv").rfind("# dynabs.train_loss.v1\nepoch,loss\n", 0) == 0);
  CHECK(slurp("cli_a/probe.json").find("\"w1\"") != std::string::npos);
  CHECK(run_cli("train mdp=cli_a/mdp.json dataset=cli_a/nothing.jsonl", "cli_a") != 0);
}

TEST_CASE("cli: evaluate emits one row per method and alpha") {
  REQUIRE(run_cli("evaluate mdp=cli_a/mdp.json n_traj=200 seeds=42 alpha_grid=0.25,0.75 "
                  "fixed_k=1,2",
                  "cli_a") == 0);
  std::istringstream csv(slurp("cli_a/eval_report.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "# dynabs.eval_report.v1");
  std::getline(csv, line);  // header
  int none = 0, dynamic = 0, fixed1 = 0, fixed2 = 0;
  while (std::getline(csv, line)) {
    if (line.rfind("none,", 0) == 0) ++none;
    if (line.rfind("dynamic,", 0) == 0) ++dynamic;
    if (line.rfind("fixed_k1,", 0) == 0) ++fixed1;
    if (line.rfind("fixed_k2,", 0) == 0) ++fixed2;
  }
  CHECK(none == 2);
  CHECK(dynamic == 2);
  CHECK(fixed1 == 2);
  CHECK(fixed2 == 2);

  // The probe stands in for ORACLE when given.
  CHECK(run_cli("evaluate mdp=cli_a/mdp.json values=cli_a/probe.json n_traj=200 seeds=42",
                "cli_a") == 0);
}

TEST_CASE("cli: verify sweeps clean and writes the report bundle") {
  REQUIRE(run_cli("verify n_mdps=25 seed=3", "cli_a") == 0);
  std::string report = slurp("cli_a/theorem_report.json");
  CHECK(report.find("control_tie_rule_mutant") != std::string::npos);
  CHECK(report.find("value_dominance") != std::string::npos);
}

TEST_CASE("cli: calibrate and robustness produce their tables") {
  REQUIRE(run_cli("calibrate horizon=4 seed=5 binary_rewards=false n_traj=400 "
                  "alpha_grid=0.2,0.6",
                  "cli_a") == 0);
  CHECK(slurp("cli_a/calibration.csv").rfind("# dynabs.calibration.v1\n", 0) == 0);
  CHECK(slurp("cli_a/split_transfer.csv").rfind("# dynabs.split_transfer.v1\n", 0) == 0);

  REQUIRE(run_cli("robustness horizon=4 seed=5 binary_rewards=false n_traj=300 n_reps=3 "
                  "alpha_grid=0.3,0.7",
                  "cli_a") == 0);
  CHECK(slurp("cli_a/monotone.csv").rfind("# dynabs.monotone_check.v1\n", 0) == 0);
  CHECK(slurp("cli_a/noise.csv").rfind("# dynabs.noise_check.v1\n", 0) == 0);
}

#endif  // DYNABS_CLI_PATH

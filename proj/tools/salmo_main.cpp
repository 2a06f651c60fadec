#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "salmo/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"safe active learning with multi-output Gaussian processes"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "execute an experiment described by a JSON config");
  std::string config_path;
  std::string out_override;
  std::uint64_t seed_override = 0;
  int jobs = 1;
  run->add_option("--config", config_path, "path to the JSON config")->required();
  run->add_option("--out", out_override, "output directory (overrides the config)");
  auto* seed_opt = run->add_option("--seed", seed_override, "base seed (overrides the config)");
  run->add_option("--jobs", jobs, "parallel repeats")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "check the theoretical bounds on random corpora");
  std::uint64_t verify_seed = 1234;
  int count = 1000;
  std::string report_path = "theory_report.csv";
  double c1_scale = 1.0;
  verify->add_option("--seed", verify_seed, "corpus seed");
  verify->add_option("--count", count, "instances per check")->check(CLI::PositiveNumber);
  verify->add_option("--report", report_path, "report CSV path");
  verify->add_option("--corrupt-c1", c1_scale)->group("");  // harness-sanity hook, hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (run->parsed()) {
    salmo::ExperimentConfig cfg;
    try {
      cfg = salmo::parse_config_file(config_path);
      if (!out_override.empty()) cfg.out_dir = out_override;
      if (seed_opt->count() > 0) cfg.base_seed = seed_override;
    } catch (const std::exception& e) {
      std::cerr << e.what() << "\n";
      return 1;
    }
    try {
      return salmo::run_experiment(cfg, jobs);
    } catch (const salmo::ConfigError& e) {
      std::cerr << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << e.what() << "\n";
      return 2;
    }
  }
  try {
    return salmo::run_verification(verify_seed, count, report_path, c1_scale);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
}

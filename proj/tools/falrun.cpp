// Experiment runner.
//
//   falrun run <experiment> --config <path> [--seed N]... [--out DIR]
//   falrun carbon --hours H --watts W --shares a,b,c --intensities x,y,z
//
// Output directory: --out, else $FAL_OUT_DIR, else [run] out_dir, else ".".
// Exit codes: 0 success, 2 bad config or arguments, 3 training diverged.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "falkit/experiments.h"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

int cmd_run(const std::string& experiment, const std::string& config_path,
            const std::vector<std::uint64_t>& seeds, const std::string& out_flag) {
  fal::ExperimentConfig cfg = fal::load_config(config_path);
  if (cfg.experiment != experiment) {
    throw fal::ConfigError("config is for experiment '" + cfg.experiment + "', not '" + experiment +
                           "'");
  }
  if (!seeds.empty()) {
    cfg.seeds = seeds;
  }
  std::string out = cfg.out_dir.empty() ? "." : cfg.out_dir;
  if (const char* env = std::getenv("FAL_OUT_DIR"); env != nullptr && *env != '\0') {
    out = env;
  }
  if (!out_flag.empty()) {
    out = out_flag;
  }
  cfg.validate();
  const auto results = fal::run_and_write(cfg, out);
  std::cout << "wrote " << results.size() << " seed file(s) and summary.json to " << out << "\n";
  return 0;
}

int cmd_carbon(const fal::CarbonInputs& c) {
  const double kg = fal::carbon_estimate(c);
  std::cout << "energy_kwh=" << fal::format_double(fal::energy_kwh(c)) << "\n"
            << "kg_co2eq=" << fal::format_double(kg) << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"falkit experiment runner"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment for each seed");
  std::string experiment;
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  run->add_option("experiment", experiment, "experiment name")
      ->required()
      ->check(CLI::IsMember(fal::experiment_names()));
  run->add_option("--config", config_path, "INI config file")->required();
  run->add_option("--seed", seeds, "seed (repeatable); overrides [run] seeds");
  run->add_option("--out", out_dir, "output directory");

  auto* carbon = app.add_subcommand("carbon", "annotation carbon footprint");
  fal::CarbonInputs inputs;
  carbon->add_option("--hours", inputs.worker_hours, "total worker hours")->required();
  carbon->add_option("--watts", inputs.watts_per_worker, "power per worker")->required();
  carbon->add_option("--shares", inputs.shares, "region shares")->required()->delimiter(',');
  carbon->add_option("--intensities", inputs.intensities, "gCO2eq/kWh per region")
      ->required()
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      return cmd_run(experiment, config_path, seeds, out_dir);
    }
    return cmd_carbon(inputs);
  } catch (const fal::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const fal::InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

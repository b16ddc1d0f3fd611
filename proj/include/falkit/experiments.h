#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "falkit/errors.h"
#include "falkit/meta.h"
#include "falkit/teachstudent.h"

namespace fal {

/// Malformed or unknown configuration entries.
class ConfigError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

struct CarbonInputs {
  double worker_hours = 0.0;
  double watts_per_worker = 0.0;
  Vec shares;       // fractions per region, summing to 1
  Vec intensities;  // gCO2eq / kWh per region
};

double energy_kwh(const CarbonInputs& c);
/// worker_hours * watts / 1000 * sum(share * intensity) / 1000, in kgCO2eq.
double carbon_estimate(const CarbonInputs& c);

struct Prop44Config {
  double epsilon = 0.02;
  std::size_t d = 5;
  std::size_t n_samples = 64;
  Vec sweep{0.1, 0.01, 0.001, 0.0001};
};

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"protonet", "maml-linreg", "prop44",
                                              "proseco",  "mtdetr",      "carbon"};
  return names;
}

struct ExperimentConfig {
  std::string experiment;
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir;
  ProtoTrainConfig protonet;
  MamlSimConfig maml;
  Prop44Config prop44;
  ProsecoConfig proseco;
  MtdetrConfig mtdetr;
  CarbonInputs carbon;

  /// Throws ConfigError when the selected experiment's settings are invalid.
  void validate() const;
};

/// INI text with a [run] section plus per-experiment sections. Unknown
/// sections and keys are errors.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

/// Shortest round-trip decimal; "inf", "-inf" and "nan" for non-finite values.
std::string format_double(double v);
std::string to_csv(const Table& t);

struct SeedResult {
  std::uint64_t seed;
  Table table;
  std::vector<std::pair<std::string, double>> metrics;
};

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

/// {experiment, rng, seeds, per_seed, aggregate: {mean, std}} as JSON text.
std::string summary_json(const ExperimentConfig& cfg, const std::vector<SeedResult>& results);

/// Runs every seed and writes <out>/<experiment>_seed<k>.csv and
/// <out>/summary.json.
std::vector<SeedResult> run_and_write(const ExperimentConfig& cfg, const std::string& out_dir);

} // namespace fal

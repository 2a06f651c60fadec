#pragma once

#include <cstdint>
#include <string>

#include "salmo/acquisition.hpp"
#include "salmo/theory.hpp"

namespace salmo {

// Dataset selection for an experiment run.  Exactly one kind is active;
// inactive fields are ignored.
struct DatasetConfig {
  std::string kind;  // "sin_sigmoid", "mogp_samples", "csv"
  int n_pool = 400;  // sin_sigmoid
  int n_test = 200;  // sin_sigmoid
  MogpSamplesParams mogp;  // mogp_samples (its repeats field follows the run)
  std::string csv_path;    // csv
  CsvSchema csv_schema;    // csv
};

struct ExperimentConfig {
  DatasetConfig dataset;
  RunSettings run;  // pipeline, mode, safety, inference, hmc, priors, ...
  int repeats = 1;
  std::uint64_t base_seed = 0;
  std::string out_dir = "out";
};

// Parses the JSON document (lower_snake_case keys mirroring the config
// structs).  Unknown or ill-typed keys throw ConfigError naming the field.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

std::string pipeline_name(Pipeline p);

// Seed scheme (recorded in the manifest): repeat r generates its dataset with
// stream 2r and runs with stream 2r+1 of the base seed; the shared
// mogp_samples draw uses stream 2*repeats.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Executes all repeats (up to `jobs` in parallel), writes one trajectory CSV
// per repeat plus aggregate.csv, timings.csv and manifest.json into out_dir.
// Returns 0 when every repeat completed (truncated runs included), 2 when any
// repeat failed; the failure is recorded in the manifest and the other
// repeats' artifacts remain valid.  Invalid configs throw ConfigError.
int run_experiment(const ExperimentConfig& cfg, int jobs);

// Runs every bound check on `count` seeded random instances each and writes a
// per-instance report CSV.  Returns 0 when all hold, 3 otherwise.  c1_scale
// deliberately rescales the lemma constant (a harness-sanity hook; 1.0 in
// normal use).
int run_verification(std::uint64_t seed, int count, const std::string& report_path,
                     double c1_scale = 1.0);

}  // namespace salmo

#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "salmo/datasets.hpp"
#include "salmo/inference.hpp"

namespace salmo {

enum class ZMode { UpperBound, LowerBound };

struct SafetySpec {
  double z_bar = 0.0;
  ZMode z_mode = ZMode::LowerBound;
  double delta = 0.05;

  void validate() const;
};

// Differential entropy of N(mu, cov): 0.5 log|cov| + (R/2) log(2 pi e).
// Ranking candidates by this score is identical to ranking by |cov|.
// A singular (clamped) covariance scores -inf; a non-finite determinant
// throws NumericError.
double entropy_score(const Eigen::MatrixXd& cov);

// Probability that the safety value respects the threshold under a scalar
// posterior: Phi((z_bar - mean)/sd) for UpperBound, the complement for
// LowerBound.  Zero variance degenerates to the indicator.
double safety_probability(const PosteriorGaussian& post, const SafetySpec& spec);

struct QueryChoice {
  int candidate = -1;     // index into the supplied posterior arrays
  double acq_score = 0.0;
  double safety_prob = 0.0;
};

// Entropy-maximizing candidate among those with safety_probability > 1 - delta
// (every candidate when enforce_constraint is false).  Exhaustive over the
// supplied arrays; ties broken uniformly at random.  Empty safe set gives
// nullopt.
std::optional<QueryChoice> safe_query(const std::vector<PosteriorGaussian>& main_posteriors,
                                      const std::vector<PosteriorGaussian>& safety_posteriors,
                                      const SafetySpec& spec, Rng& rng,
                                      bool enforce_constraint = true);

// Uniform choice among constraint-passing candidates.
std::optional<QueryChoice> random_safe_query(const std::vector<PosteriorGaussian>& safety_posteriors,
                                             const SafetySpec& spec, Rng& rng,
                                             bool enforce_constraint = true);

struct MetricsRecord {
  Eigen::VectorXd rmse_per_channel;
  double rmse_mean = 0.0;
  double test_log_density = 0.0;  // mean per (point, channel)
  double safety_precision = 1.0;  // among flagged-safe reference points; 1 if none flagged
};

// Plain metric arithmetic over per-(test point, channel) predictions plus the
// safety flags of a reference set.  pred_var feeds only the log density; add
// observation noise to it beforehand when targets are noisy.
MetricsRecord evaluate_metrics(const Eigen::MatrixXd& pred_mean, const Eigen::MatrixXd& pred_var,
                               const Eigen::MatrixXd& targets,
                               const std::vector<char>& flagged_safe,
                               const std::vector<char>& truly_safe);

enum class Pipeline { AlMogp, RsMogp, AlIndGps, AlMogpNoSafe };
enum class ObservationMode { Poo, Foo };
enum class InferenceMethod { TypeII, Hmc, Fixed };

struct RunSettings {
  Pipeline pipeline = Pipeline::AlMogp;
  ObservationMode mode = ObservationMode::Poo;
  SafetySpec safety;        // z_bar = NaN adopts the dataset threshold/mode
  InferenceMethod inference = InferenceMethod::Hmc;
  HmcSettings hmc;          // seed field ignored; the loop derives chain seeds
  HyperPrior priors;
  int restarts = 5;         // type-II starts
  int iter_num = 0;
  int initial_nsum = 12;    // POO: divisible by P; FOO: divisible by P, /P inputs
  int latents = 0;          // 0 means L = P
  KernelFamily kernel_family = KernelFamily::Matern52;
  // Fixed-theta inference (no refitting); required iff inference == Fixed.
  std::optional<LmcModel> fixed_model;
  std::optional<KernelSpec> fixed_safety_kernel;
  double fixed_safety_noise = 1e-2;

  void validate() const;
};

struct TrajectoryRecord {
  int iteration = 0;  // 0 is the baseline fit on the initial design, no query
  int n_sum = 0;
  Eigen::VectorXd queried_x;  // empty on the baseline record
  int queried_channel = -1;   // -1: no single channel (baseline or FOO query)
  double acq_score = 0.0;
  double safety_prob = 0.0;
  bool truly_safe = false;
  MetricsRecord metrics;
  double inference_seconds = 0.0;
  double scoring_seconds = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryRecord> records;
  std::string status = "completed";  // or "empty_safe_set", "pool_exhausted"
  bool truncated = false;

  // Fraction of queries whose queried point was truly safe (baseline excluded).
  double safe_query_fraction() const;
};

// Pool-based safe active learning.  Each round re-infers hyperparameters for
// the main model and the safety GP (an independent single-output GP on z),
// scores the remaining pool, queries, and moves the point into the observed
// set.  Record 0 is the baseline fit on the initial design; record i >= 1
// reflects the model state after the i-th query.
Trajectory run_safe_al(const RunSettings& settings, const Dataset& dataset, std::uint64_t seed);

}  // namespace salmo

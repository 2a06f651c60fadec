#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "salmo/gp.hpp"

namespace salmo {

// Pool/test split with hidden oracle labels for simulated active learning.
// pool_z holds the observable (noisy) safety values; pool_z_true the
// noise-free truth behind the truly-safe flags (identical to pool_z for
// external data, where no noise-free truth exists).
struct Dataset {
  int channels = 0;  // P
  int dim = 0;       // D
  Eigen::MatrixXd pool_x;      // n_pool x D
  Eigen::MatrixXd pool_y;      // n_pool x P
  Eigen::VectorXd pool_z;      // observable safety labels
  Eigen::VectorXd pool_z_true; // noise-free safety truth
  std::vector<char> pool_safe; // truly-safe flag per pool row
  Eigen::MatrixXd test_x;      // n_test x D
  Eigen::MatrixXd test_y;      // n_test x P
  std::vector<char> test_safe; // truly-safe flag per test row
  double safety_threshold = 0.0;
  bool safety_lower_bound = true;  // safe means z above the threshold
  bool noisy_test_targets = false; // predictive density adds observation noise

  int n_pool() const { return int(pool_x.rows()); }
  int n_test() const { return int(test_x.rows()); }
  // Whole pool as a fully observed set (all channels at every pool input),
  // safety values attached.
  ObservationSet full_pool_observations() const;
};

// Two-channel toy problem on x in [-2, 2]:
//   f(x) = (sin(10x) + logistic(2x), sin(10x) - logistic(2x)),
//   h(x) = exp(-(x - 0.1)^2 / 2), safe iff h(x) > 0.7,
//   y ~ N(f(x), 0.4^2 I), z ~ N(h(x), 0.05^2).
// Test inputs are drawn from the true safe interval and carry noise-free
// targets.  Draw order (fixed): pool x, pool y noise, pool z noise, test x.
Dataset gen_sin_sigmoid(int n_pool, int n_test, std::uint64_t seed);

double sin_sigmoid_f(double x, int channel);
double sin_sigmoid_h(double x);
// True safe interval (open): h(x) > 0.7.
std::pair<double, double> sin_sigmoid_safe_interval();

struct MogpSamplesParams {
  int dims = 2;      // D
  int channels = 4;  // P
  int latents = 3;   // L
  int n_train = 2000;
  int n_test = 500;
  int repeats = 30;  // E
  double noise_y = 0.4;
  double noise_z = 0.05;
  double safe_quantile = 0.2;
};

// Samples E datasets from a shared LMC prior:
//   1. X: uniform [-2, 2)^D, exact duplicates redrawn, then shuffled.
//   2. L+1 squared-exponential kernels with variance and lengthscale drawn
//      from [0.01, 1); latent variances then fixed to 1, safety lengthscale
//      fixed to 1.
//   3. Per repeat, L latent trajectories ~ N(0, k_l(X,X)); then per repeat a
//      noise-free safety trajectory ~ N(0, k_z(X,X)).
//   4. W: P rows of L standard normals, zero vector rejected, rows normalized
//      to unit L2 norm.
//   5. Y_e = G_e W'.
//   6. Noise added to Y (0.4) and Z (0.05).
// The safety threshold is the safe_quantile-quantile of the pooled noisy Z
// across repeats, used as a lower bound; first n_train rows form the pool,
// the rest the (noisy-target) test split.
std::vector<Dataset> gen_mogp_samples(const MogpSamplesParams& params, std::uint64_t seed);

// Generator internals, exposed for validation: shared inputs (train rows
// first), the L latent kernels followed by the safety kernel, the mixing
// matrix, and the pooled noisy safety values behind the threshold.
struct MogpSamplesTrace {
  Eigen::MatrixXd x;
  std::vector<KernelSpec> kernels;
  Eigen::MatrixXd w;
  std::vector<double> pooled_noisy_z;
  double threshold = 0.0;
};

std::vector<Dataset> gen_mogp_samples(const MogpSamplesParams& params, std::uint64_t seed,
                                      MogpSamplesTrace* trace);

struct CsvSchema {
  std::vector<std::string> input_columns;
  std::vector<std::string> output_columns;
  std::string safety_column;
  double test_fraction = 0.2;  // final rows held out as the test split
  bool standardize = true;     // inputs/outputs to mean 0 / var 1 on the training split
  // Threshold on the (unstandardized) safety column; NaN means use the
  // 20%-quantile of the training split's safety values.
  double safety_threshold = std::numeric_limits<double>::quiet_NaN();
  bool safety_lower_bound = true;
};

// Comma-separated, header row required, UTF-8, '.' decimal separator.
// Parse failures throw ParseError naming the file row and column.
Dataset load_csv_dataset(const std::string& path, const CsvSchema& schema);

// Linear-interpolation quantile between order statistics (type-7 convention):
// position (n-1)q in the sorted values, endpoints at q=0 and q=1.
double quantile(std::vector<double> values, double q);

}  // namespace salmo

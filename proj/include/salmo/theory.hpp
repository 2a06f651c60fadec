#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "salmo/gp.hpp"

namespace salmo {

// Numerical verification of the finite-sample inequalities satisfied by
// greedy max-uncertainty querying on LMC models with bounded mixing weights,
// kernels, and noise.

struct BoundConstants {
  double w_hat = 0.0;  // bound on |W(p,l)|
  double v_hat = 0.0;  // bound on the kernels (stationary: max variance)
  double psi = 0.0;    // bound on noise variances
  int latents = 0;
  int channels = 0;
  double c1 = 0.0;  // L w^2 v / log(1 + L w^2 v / psi)
  double c2 = 0.0;  // (L w^2 v)^P / log(1 + (L w^2 v / psi)^P)
};

BoundConstants bound_constants(const LmcModel& model);

// Prior mutual information between noisy observations at the indexed points
// and the latent values: 0.5 log |I + diag(noise)^-1 gram|.
double mutual_info_direct(const LmcModel& model, const std::vector<IndexedPoint>& points);

struct BoundReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs (tightest inequality for multi-part checks)
  bool holds = false;
  bool precondition_ok = true;
};

// Greedy max-variance sequence over a candidate pool: step k selects the
// (input, channel) with largest predictive variance given the first k-1
// selections.  Ties resolve to the lowest index.  `initial` lists pool
// entries observed before the first step: they condition every variance and
// never get selected.
std::vector<int> greedy_variance_sequence(const LmcModel& model,
                                          const std::vector<IndexedPoint>& pool, int n,
                                          const std::vector<int>& initial = {});
// Fully observed analogue: maximizes det of the P x P predictive covariance.
std::vector<int> greedy_det_sequence(const LmcModel& model, const Eigen::MatrixXd& pool_x, int n,
                                     const std::vector<int>& initial = {});

// Mean selected variance vs (2 C1 / n) * mutual information of the selected
// set.  `sequence` must come from the greedy rule; otherwise the report's
// precondition flag is cleared (the inequality may legitimately fail).
// `initial` entries are conditioned on throughout and barred from selection;
// the bound keeps the unconditional information of the selected set, which
// conditioning can only shrink.
BoundReport check_lemma1(const LmcModel& model, const std::vector<IndexedPoint>& pool,
                         const std::vector<int>& sequence,
                         const std::vector<int>& initial = {});
// Determinant form with C2 over fully observed selections.
BoundReport check_lemma1_full(const LmcModel& model, const Eigen::MatrixXd& pool_x,
                              const std::vector<int>& sequence,
                              const std::vector<int>& initial = {});

// Fischer step: joint MI of a fully observed block is at most the sum of
// per-channel MIs (equality when W makes channels independent).
BoundReport check_fischer(const LmcModel& model, const Eigen::MatrixXd& x);

// Eigenvalue bound for a sum of PSD matrices: with eigenvalues sorted
// descending, eig_s(sum A_l) <= sum_l eig_{floor((s-1)/L)+1}(A_l).
BoundReport check_weyl(const std::vector<Eigen::MatrixXd>& matrices);

struct DetBoundsReport {
  double det_posterior = 0.0;
  double det_prior = 0.0;
  double det_cap = 0.0;  // (L w^2 v)^P
  double scalar_posterior = 0.0;
  double scalar_prior = 0.0;
  double scalar_cap = 0.0;  // L w^2 v
  double slack = 0.0;
  bool holds = false;
};

// Posterior covariance determinant below prior determinant below the model
// cap, and the same chain for a single channel's variance (channel 0).
DetBoundsReport check_det_bounds(const LmcModel& model, const Eigen::MatrixXd& x,
                                 const Eigen::Ref<const Eigen::VectorXd>& x_star);

using CovarianceFn =
    std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)>;

// Covariance of one output channel: eta_{p,p}(x, x').
CovarianceFn channel_cov(const LmcModel& model, int p);

// Greedy maximization of 0.5 log |I + K_S / noise| over n-subsets of the pool
// (the exact maximum is NP-hard; greedy enjoys the (1 - 1/e) submodular
// guarantee).  cumulative, when given, receives the value after each step.
std::pair<double, std::vector<int>> greedy_max_info_gain(const CovarianceFn& cov, double noise_var,
                                                         const Eigen::MatrixXd& pool, int n,
                                                         std::vector<double>* cumulative = nullptr);
std::pair<double, std::vector<int>> greedy_max_info_gain(const KernelSpec& kernel, double noise_var,
                                                         const Eigen::MatrixXd& pool, int n,
                                                         std::vector<double>* cumulative = nullptr);

}  // namespace salmo

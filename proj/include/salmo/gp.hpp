#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "salmo/kernels.hpp"

namespace salmo {

// Sparse multi-output observations.  `entries` lists (input index, channel,
// value) triples; any subset of the full P x N grid is allowed and entry order
// carries no meaning (posteriors are permutation invariant).  Safety values
// are per-input scalars kept alongside; the main model never sees them.
struct ObservationSet {
  Eigen::MatrixXd inputs;  // N x D, one input per row
  struct Entry {
    int input = 0;
    int channel = 0;
    double value = 0.0;
  };
  std::vector<Entry> entries;
  std::vector<std::pair<int, double>> safety_values;  // (input index, z)
  int channels = 1;                                   // P

  int n_inputs() const { return int(inputs.rows()); }
  int dim() const { return int(inputs.cols()); }
  int n_sum() const { return int(entries.size()); }
  bool fully_observed() const { return n_sum() == channels * n_inputs(); }

  // Throws InputError on invalid indices or duplicate (input, channel) pairs.
  void validate() const;
};

struct PosteriorGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // 1x1 for single-target predictions
};

// Count of negative predictive variances clamped to zero since process start
// (round-off bookkeeping; the clamp itself is silent).
long negative_variance_clamps();

// Single-output GP posterior with zero prior mean:
//   mean = k*' (K + noise I)^-1 y,  var = k(x*,x*) - k*' (K + noise I)^-1 k*.
// X has one input per row.  N=0 returns the prior.
PosteriorGaussian so_posterior(const KernelSpec& kernel, const Eigen::MatrixXd& x,
                               const Eigen::VectorXd& y, double noise_var,
                               const Eigen::Ref<const Eigen::VectorXd>& x_star);

// Factorized (gram + noise diagonal) for one model/observation pair; reused
// across predictions and the marginal likelihood.  Construction applies the
// jitter policy: plain Cholesky first, then jitter 1e-10 * mean(diag)
// escalated tenfold up to 1e-4 * mean(diag), then NumericError.
class MogpSolver {
 public:
  MogpSolver(const LmcModel& model, const ObservationSet& obs);

  double lml() const;
  // Scalar posterior for channel p_star at x_star, any sparse observation set.
  PosteriorGaussian predict_partial(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                    int p_star) const;
  // All-channel posterior (P-dim mean, P x P covariance) at x_star.
  PosteriorGaussian predict_full(const Eigen::Ref<const Eigen::VectorXd>& x_star) const;

  double jitter_used() const { return jitter_used_; }
  int n_sum() const { return int(entry_x_.size()); }

 private:
  Eigen::VectorXd cross_column(const Eigen::Ref<const Eigen::VectorXd>& x_star, int p_star) const;

  LmcModel model_;
  std::vector<Eigen::VectorXd> entry_x_;
  std::vector<int> entry_p_;
  Eigen::VectorXd y_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
  double jitter_used_ = 0.0;
};

PosteriorGaussian mogp_posterior_full(const LmcModel& model, const ObservationSet& obs,
                                      const Eigen::Ref<const Eigen::VectorXd>& x_star);
PosteriorGaussian mogp_posterior_partial(const LmcModel& model, const ObservationSet& obs,
                                         const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                         int p_star);

// log N(y | 0, gram + noise diagonal) over the observed entries.
double log_marginal_likelihood(const LmcModel& model, const ObservationSet& obs);

// Unconstrained hyperparameter vector for an LMC model.  Positive parameters
// travel in log space; W entries travel raw.  Layout:
//   [log kernel variance]_l, [log lengthscale]_l, [W row-major (p,l)]?, [log noise var]_p
// with the W block present only when include_w.  Only isotropic kernel
// families participate (SqExpMatrix has no scalar lengthscale).
struct ParamSpace {
  LmcModel proto;        // supplies structure and any frozen values (e.g. W)
  bool include_w = true;

  int dim() const;
  Eigen::VectorXd pack(const LmcModel& m) const;
  LmcModel unpack(const Eigen::VectorXd& theta) const;
  void validate() const;
};

// Marginal-likelihood value and gradient in the unconstrained parameterization.
// Caches pairwise distances, channel indices and values of a fixed observation
// set so repeated evaluations (line searches, leapfrog trajectories) only pay
// for kernel rebuilds and one factorization.
class LmlGradient {
 public:
  LmlGradient(ParamSpace space, const ObservationSet& obs);

  double value(const Eigen::VectorXd& theta) const;
  double value_and_grad(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;
  const ParamSpace& space() const { return space_; }

 private:
  double eval(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const;

  ParamSpace space_;
  Eigen::MatrixXd dist_;   // pairwise distances between entry inputs
  Eigen::MatrixXd dist2_;  // squared distances
  std::vector<int> entry_p_;
  Eigen::VectorXd y_;
};

// Gradient at the model's own hyperparameters, same layout as ParamSpace.
Eigen::VectorXd lml_gradient(const LmcModel& model, const ObservationSet& obs,
                             bool include_w = true);

}  // namespace salmo

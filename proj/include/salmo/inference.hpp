#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "salmo/gp.hpp"
#include "salmo/rng.hpp"

namespace salmo {

struct GammaParams {
  double alpha = 1.0;  // shape
  double beta = 1.0;   // rate; mean = alpha / beta
};

// Independent hyperpriors: Gamma on each positive hyperparameter, zero-mean
// normal on mixing-matrix entries.  Densities are evaluated in the
// unconstrained parameterization of ParamSpace, Jacobian of the log transform
// included, so HMC and MAP-style code can add them to the marginal likelihood
// directly.
struct HyperPrior {
  GammaParams kernel_variance{2.5, 1.0};
  GammaParams kernel_lengthscale{1.5, 1.0};
  GammaParams noise_variance{1.5, 3.0};
  double w_stddev = 2.0;

  void validate() const;
  double log_density(const ParamSpace& space, const Eigen::VectorXd& theta,
                     Eigen::VectorXd* grad = nullptr) const;
  Eigen::VectorXd draw(const ParamSpace& space, Rng& rng) const;
};

struct HmcSettings {
  int num_results = 100;
  int burn_in = 300;
  int thin = 20;
  int leapfrog_steps = 10;
  double step_size = 0.01;
  double target_accept = 0.75;
  // Dual-averaging step-size adaptation runs over the first adapt_fraction of
  // burn-in, then the averaged step is frozen for the rest of the chain.
  double adapt_fraction = 0.3;
  Eigen::VectorXd mass_diag;  // empty = identity mass matrix
  std::uint64_t seed = 0;

  void validate() const;
};

struct HmcDiagnostics {
  double accept_rate = 0.0;
  int divergences = 0;
  double final_step_size = 0.0;
};

// Target: log density and its gradient at q; may return -inf to reject a
// region (the chain treats non-finite proposals as divergent, never fatal).
using LogDensityTarget = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

// Plain HMC chain over an arbitrary target (used directly by tests; model
// inference wraps it below).  Fixed seed reproduces the chain bit-for-bit.
// Throws InferenceError if every proposal in the chain was rejected.
std::vector<Eigen::VectorXd> hmc_chain(const LogDensityTarget& target, Eigen::VectorXd q0,
                                       const HmcSettings& settings,
                                       HmcDiagnostics* diag = nullptr);

// Posterior sampling of unconstrained hyperparameters: target = marginal
// likelihood + prior log density.  Returns exactly num_results vectors.
std::vector<Eigen::VectorXd> hmc_sample(const ParamSpace& space, const ObservationSet& obs,
                                        const HyperPrior& prior, const HmcSettings& settings,
                                        const Eigen::VectorXd& init,
                                        HmcDiagnostics* diag = nullptr);

// Type-II maximum likelihood: L-BFGS with Armijo backtracking, started from
// `init` plus (restarts - 1) draws from the hyperpriors.  Returns the theta
// with the best achieved marginal likelihood.
Eigen::VectorXd optimize_hyperparameters(const ParamSpace& space, const ObservationSet& obs,
                                         const HyperPrior& prior, const Eigen::VectorXd& init,
                                         int restarts, std::uint64_t seed);

// Moment match of an equal-weight Gaussian mixture:
//   mean = average of component means,
//   cov  = average of (cov + mean mean') minus mean mean' of the average.
PosteriorGaussian mixture_moment_match(const std::vector<PosteriorGaussian>& components);

}  // namespace salmo

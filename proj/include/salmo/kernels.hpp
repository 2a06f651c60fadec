#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "salmo/errors.hpp"

namespace salmo {

// Stationary covariance functions and the linear model of coregionalization
// (LMC) built on top of them.
//
// Parameterization note, worth reading twice: the isotropic squared
// exponential here is
//
//     k(x, x') = variance * exp(-|x - x'|^2 / lengthscale)
//
// i.e. the lengthscale divides the *squared* distance directly, with no
// factor 2 and no square on the lengthscale.  The matrix variant is
// k(x, x') = variance * exp(-(x-x')' M (x-x') / 2) with M symmetric positive
// definite, so M plays the role of an inverse squared lengthscale.  The
// Matern-5/2 uses the standard form where the lengthscale divides the plain
// distance.  Keep this in mind when porting hyperparameters from libraries
// that use exp(-r^2 / (2 l^2)).

enum class KernelFamily { Matern52, SqExpIso, SqExpMatrix };

// Closed forms, templated on scalar so tests can evaluate them in extended
// precision.  r is the Euclidean distance, r2 its square.
template <typename Scalar>
Scalar matern52_value(Scalar r, Scalar variance, Scalar lengthscale) {
  const Scalar sqrt5 = std::sqrt(Scalar(5));
  Scalar t = sqrt5 * r / lengthscale;
  return variance * (Scalar(1) + t + t * t / Scalar(3)) * std::exp(-t);
}

template <typename Scalar>
Scalar sq_exp_iso_value(Scalar r2, Scalar variance, Scalar lengthscale) {
  return variance * std::exp(-r2 / lengthscale);
}

struct KernelSpec {
  KernelFamily family = KernelFamily::Matern52;
  double variance = 1.0;
  double lengthscale = 1.0;               // Matern52, SqExpIso
  Eigen::MatrixXd lengthscale_matrix;     // SqExpMatrix only, SPD

  static KernelSpec matern52(double variance, double lengthscale);
  static KernelSpec sq_exp_iso(double variance, double lengthscale);
  static KernelSpec sq_exp_matrix(double variance, Eigen::MatrixXd m);

  // Throws SpecError on non-positive variance/lengthscale or a lengthscale
  // matrix that fails a Cholesky with pivot tolerance 1e-12.
  void validate() const;
};

double eval_kernel(const KernelSpec& k, const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& x2);

// Multi-output covariance: eta_{p,p'}(x, x') = sum_l W(p,l) W(p',l) k_l(x, x').
// Latent processes are independent a priori; rows of W mix them into channels.
struct LmcModel {
  int channels = 0;                       // P
  int latents = 0;                        // L
  std::vector<KernelSpec> kernels;        // size L
  Eigen::MatrixXd w;                      // P x L
  Eigen::VectorXd noise_vars;             // size P, per-channel observation noise

  void validate() const;
};

double lmc_cov(const LmcModel& m, int p, int p2, const Eigen::Ref<const Eigen::VectorXd>& x,
               const Eigen::Ref<const Eigen::VectorXd>& x2);

// Convolution-process covariance: each channel observes latent white-noise
// sources smoothed by a Gaussian kernel with precision A_p, and the latent
// covariances are Gaussian with precision Lambda_l.  The closed form is
//   cov(f_p(x), f_p'(x')) =
//     sum_l W(p,l) W(p',l) c_l N(x - x' | 0, A_p^-1 + A_p'^-1 + Lambda_l^-1).
struct ConvProcessModel {
  int channels = 0;
  int latents = 0;
  std::vector<Eigen::MatrixXd> smoothing_precisions;  // size P, SPD, D x D
  std::vector<Eigen::MatrixXd> latent_precisions;     // size L, SPD, D x D
  Eigen::VectorXd latent_scales;                      // size L, c_l > 0
  Eigen::MatrixXd w;                                  // P x L

  void validate() const;
};

double conv_cov(const ConvProcessModel& m, int p, int p2,
                const Eigen::Ref<const Eigen::VectorXd>& x,
                const Eigen::Ref<const Eigen::VectorXd>& x2);

// One observable: input location plus channel index (0-based).
struct IndexedPoint {
  Eigen::VectorXd x;
  int channel = 0;
};

// Cross-covariance block [eta_{p_i, p_j}(x_i, x_j)] for rows x cols.  No
// jitter is added here; regularization is the posterior layer's concern.
Eigen::MatrixXd assemble_gram(const LmcModel& m, const std::vector<IndexedPoint>& rows,
                              const std::vector<IndexedPoint>& cols);

}  // namespace salmo

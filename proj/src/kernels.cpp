#include "salmo/kernels.hpp"

#include <Eigen/Cholesky>

namespace salmo {

namespace {

// SPD check used for precision-like matrices: symmetric and Cholesky-positive
// with pivot tolerance 1e-12 relative to the mean diagonal.
bool is_spd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  if (!m.isApprox(m.transpose(), 1e-12)) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) return false;
  double floor = 1e-12 * m.diagonal().mean();
  return llt.matrixL()(0, 0) * llt.matrixL()(0, 0) > floor;
}

void check_same_dim(const Eigen::Ref<const Eigen::VectorXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& x2) {
  if (x.size() != x2.size())
    throw InputError("eval_kernel: inputs have different dimension");
  if (x.size() == 0) throw InputError("eval_kernel: empty input");
}

}  // namespace

KernelSpec KernelSpec::matern52(double variance, double lengthscale) {
  KernelSpec k;
  k.family = KernelFamily::Matern52;
  k.variance = variance;
  k.lengthscale = lengthscale;
  k.validate();
  return k;
}

KernelSpec KernelSpec::sq_exp_iso(double variance, double lengthscale) {
  KernelSpec k;
  k.family = KernelFamily::SqExpIso;
  k.variance = variance;
  k.lengthscale = lengthscale;
  k.validate();
  return k;
}

KernelSpec KernelSpec::sq_exp_matrix(double variance, Eigen::MatrixXd m) {
  KernelSpec k;
  k.family = KernelFamily::SqExpMatrix;
  k.variance = variance;
  k.lengthscale_matrix = std::move(m);
  k.validate();
  return k;
}

void KernelSpec::validate() const {
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw SpecError("kernel variance must be positive and finite");
  if (family == KernelFamily::SqExpMatrix) {
    if (!is_spd(lengthscale_matrix))
      throw SpecError("lengthscale matrix must be symmetric positive definite");
  } else {
    if (!(lengthscale > 0.0) || !std::isfinite(lengthscale))
      throw SpecError("kernel lengthscale must be positive and finite");
  }
}

double eval_kernel(const KernelSpec& k, const Eigen::Ref<const Eigen::VectorXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& x2) {
  check_same_dim(x, x2);
  switch (k.family) {
    case KernelFamily::Matern52:
      return matern52_value((x - x2).norm(), k.variance, k.lengthscale);
    case KernelFamily::SqExpIso:
      return sq_exp_iso_value((x - x2).squaredNorm(), k.variance, k.lengthscale);
    case KernelFamily::SqExpMatrix: {
      if (k.lengthscale_matrix.rows() != x.size())
        throw InputError("eval_kernel: lengthscale matrix dimension does not match input");
      Eigen::VectorXd d = x - x2;
      return k.variance * std::exp(-0.5 * d.dot(k.lengthscale_matrix * d));
    }
  }
  throw InputError("eval_kernel: unknown kernel family");
}

void LmcModel::validate() const {
  if (channels <= 0 || latents <= 0)
    throw SpecError("lmc model needs at least one channel and one latent");
  if (int(kernels.size()) != latents)
    throw SpecError("lmc model kernel count does not match latent count");
  for (const auto& k : kernels) k.validate();
  if (w.rows() != channels || w.cols() != latents)
    throw SpecError("lmc mixing matrix must be channels x latents");
  if (!w.allFinite()) throw SpecError("lmc mixing matrix must be finite");
  if (noise_vars.size() != channels)
    throw SpecError("lmc model needs one noise variance per channel");
  for (int p = 0; p < channels; ++p)
    if (!(noise_vars[p] > 0.0) || !std::isfinite(noise_vars[p]))
      throw SpecError("noise variances must be positive and finite");
}

double lmc_cov(const LmcModel& m, int p, int p2, const Eigen::Ref<const Eigen::VectorXd>& x,
               const Eigen::Ref<const Eigen::VectorXd>& x2) {
  if (p < 0 || p >= m.channels || p2 < 0 || p2 >= m.channels)
    throw InputError("lmc_cov: channel index out of range");
  double s = 0.0;
  for (int l = 0; l < m.latents; ++l)
    s += m.w(p, l) * m.w(p2, l) * eval_kernel(m.kernels[l], x, x2);
  return s;
}

void ConvProcessModel::validate() const {
  if (channels <= 0 || latents <= 0)
    throw SpecError("convolution model needs at least one channel and one latent");
  if (int(smoothing_precisions.size()) != channels)
    throw SpecError("convolution model needs one smoothing precision per channel");
  if (int(latent_precisions.size()) != latents)
    throw SpecError("convolution model needs one latent precision per latent");
  const auto dim = smoothing_precisions[0].rows();
  for (const auto& a : smoothing_precisions)
    if (!is_spd(a) || a.rows() != dim) throw SpecError("smoothing precisions must be SPD, same dim");
  for (const auto& l : latent_precisions)
    if (!is_spd(l) || l.rows() != dim) throw SpecError("latent precisions must be SPD, same dim");
  if (latent_scales.size() != latents) throw SpecError("convolution model needs one scale per latent");
  for (int l = 0; l < latents; ++l)
    if (!(latent_scales[l] > 0.0)) throw SpecError("latent scales must be positive");
  if (w.rows() != channels || w.cols() != latents)
    throw SpecError("convolution mixing matrix must be channels x latents");
}

double conv_cov(const ConvProcessModel& m, int p, int p2,
                const Eigen::Ref<const Eigen::VectorXd>& x,
                const Eigen::Ref<const Eigen::VectorXd>& x2) {
  if (p < 0 || p >= m.channels || p2 < 0 || p2 >= m.channels)
    throw InputError("conv_cov: channel index out of range");
  check_same_dim(x, x2);
  const auto dim = x.size();
  if (m.smoothing_precisions[0].rows() != dim)
    throw InputError("conv_cov: precision dimension does not match input");
  Eigen::VectorXd d = x - x2;
  Eigen::MatrixXd base = m.smoothing_precisions[p].inverse() + m.smoothing_precisions[p2].inverse();
  double s = 0.0;
  for (int l = 0; l < m.latents; ++l) {
    Eigen::MatrixXd cov = base + m.latent_precisions[l].inverse();
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericError("conv_cov: covariance not SPD");
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < dim; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    double q = d.dot(llt.solve(d));
    double dens = std::exp(-0.5 * (double(dim) * std::log(2.0 * M_PI) + logdet + q));
    s += m.w(p, l) * m.w(p2, l) * m.latent_scales[l] * dens;
  }
  return s;
}

Eigen::MatrixXd assemble_gram(const LmcModel& m, const std::vector<IndexedPoint>& rows,
                              const std::vector<IndexedPoint>& cols) {
  Eigen::MatrixXd g(rows.size(), cols.size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < cols.size(); ++j)
      g(i, j) = lmc_cov(m, rows[i].channel, cols[j].channel, rows[i].x, cols[j].x);
  return g;
}

}  // namespace salmo

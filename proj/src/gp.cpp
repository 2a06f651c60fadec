#include "salmo/gp.hpp"

#include <atomic>
#include <cmath>
#include <set>

namespace salmo {

namespace {

std::atomic<long> g_negative_variance_clamps{0};

double clamp_variance(double v) {
  if (v < 0.0) {
    g_negative_variance_clamps.fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  return v;
}

// Jitter policy shared by every factorization of (gram + noise diagonal).
Eigen::LLT<Eigen::MatrixXd> factorize_with_jitter(Eigen::MatrixXd k, double* jitter_used) {
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() == Eigen::Success || k.rows() == 0) {
    if (jitter_used) *jitter_used = 0.0;
    return llt;
  }
  const double base = k.diagonal().mean();
  for (double mult = 1e-10; mult <= 1e-4 * 1.0000001; mult *= 10.0) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += mult * base;
    llt.compute(kj);
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = mult * base;
      return llt;
    }
  }
  throw NumericError("Cholesky failed after jitter escalation to 1e-4 * mean diagonal");
}

double log_det_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  double s = 0.0;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace

long negative_variance_clamps() { return g_negative_variance_clamps.load(); }

void ObservationSet::validate() const {
  if (channels <= 0) throw InputError("observation set needs at least one channel");
  std::set<std::pair<int, int>> seen;
  for (const auto& e : entries) {
    if (e.input < 0 || e.input >= n_inputs())
      throw InputError("observation entry references an input index out of range");
    if (e.channel < 0 || e.channel >= channels)
      throw InputError("observation entry references a channel out of range");
    if (!std::isfinite(e.value)) throw InputError("observation value must be finite");
    if (!seen.insert({e.input, e.channel}).second)
      throw InputError("duplicate (input, channel) observation entry");
  }
  for (const auto& [idx, z] : safety_values) {
    if (idx < 0 || idx >= n_inputs())
      throw InputError("safety value references an input index out of range");
    if (!std::isfinite(z)) throw InputError("safety value must be finite");
  }
}

PosteriorGaussian so_posterior(const KernelSpec& kernel, const Eigen::MatrixXd& x,
                               const Eigen::VectorXd& y, double noise_var,
                               const Eigen::Ref<const Eigen::VectorXd>& x_star) {
  if (x.rows() != y.size()) throw InputError("so_posterior: |X| must equal |y|");
  if (!(noise_var > 0.0)) throw InputError("so_posterior: noise variance must be positive");
  kernel.validate();
  const int n = int(x.rows());
  const double prior = eval_kernel(kernel, x_star, x_star);
  PosteriorGaussian out;
  out.mean = Eigen::VectorXd::Zero(1);
  out.cov = Eigen::MatrixXd::Constant(1, 1, prior);
  if (n == 0) return out;

  Eigen::MatrixXd k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      k(i, j) = eval_kernel(kernel, x.row(i), x.row(j));
      k(j, i) = k(i, j);
    }
  k.diagonal().array() += noise_var;
  auto llt = factorize_with_jitter(std::move(k), nullptr);

  Eigen::VectorXd ks(n);
  for (int i = 0; i < n; ++i) ks[i] = eval_kernel(kernel, x.row(i), x_star);
  out.mean[0] = ks.dot(llt.solve(y));
  Eigen::VectorXd v = llt.matrixL().solve(ks);
  out.cov(0, 0) = clamp_variance(prior - v.squaredNorm());
  return out;
}

MogpSolver::MogpSolver(const LmcModel& model, const ObservationSet& obs) : model_(model) {
  model_.validate();
  obs.validate();
  if (obs.channels != model_.channels)
    throw InputError("observation set channel count does not match model");
  const int n = obs.n_sum();
  entry_x_.reserve(n);
  entry_p_.reserve(n);
  y_.resize(n);
  for (int i = 0; i < n; ++i) {
    entry_x_.push_back(obs.inputs.row(obs.entries[i].input));
    entry_p_.push_back(obs.entries[i].channel);
    y_[i] = obs.entries[i].value;
  }
  if (n == 0) return;
  Eigen::MatrixXd k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      k(i, j) = lmc_cov(model_, entry_p_[i], entry_p_[j], entry_x_[i], entry_x_[j]);
      k(j, i) = k(i, j);
    }
  for (int i = 0; i < n; ++i) k(i, i) += model_.noise_vars[entry_p_[i]];
  llt_ = factorize_with_jitter(std::move(k), &jitter_used_);
  alpha_ = llt_.solve(y_);
}

double MogpSolver::lml() const {
  const int n = n_sum();
  if (n == 0) throw InputError("log marginal likelihood needs at least one observation");
  return -0.5 * y_.dot(alpha_) - 0.5 * log_det_from_llt(llt_) - 0.5 * n * kLog2Pi;
}

Eigen::VectorXd MogpSolver::cross_column(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                         int p_star) const {
  const int n = n_sum();
  Eigen::VectorXd ks(n);
  for (int i = 0; i < n; ++i)
    ks[i] = lmc_cov(model_, entry_p_[i], p_star, entry_x_[i], x_star);
  return ks;
}

PosteriorGaussian MogpSolver::predict_partial(const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                              int p_star) const {
  if (p_star < 0 || p_star >= model_.channels)
    throw InputError("predict: channel index out of range");
  const double prior = lmc_cov(model_, p_star, p_star, x_star, x_star);
  PosteriorGaussian out;
  out.mean = Eigen::VectorXd::Zero(1);
  out.cov = Eigen::MatrixXd::Constant(1, 1, prior);
  if (n_sum() == 0) return out;
  Eigen::VectorXd ks = cross_column(x_star, p_star);
  out.mean[0] = ks.dot(alpha_);
  Eigen::VectorXd v = llt_.matrixL().solve(ks);
  out.cov(0, 0) = clamp_variance(prior - v.squaredNorm());
  return out;
}

PosteriorGaussian MogpSolver::predict_full(const Eigen::Ref<const Eigen::VectorXd>& x_star) const {
  const int p = model_.channels;
  Eigen::MatrixXd prior(p, p);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b <= a; ++b) {
      prior(a, b) = lmc_cov(model_, a, b, x_star, x_star);
      prior(b, a) = prior(a, b);
    }
  PosteriorGaussian out;
  out.mean = Eigen::VectorXd::Zero(p);
  out.cov = prior;
  if (n_sum() == 0) return out;
  Eigen::MatrixXd ks(n_sum(), p);
  for (int b = 0; b < p; ++b) ks.col(b) = cross_column(x_star, b);
  out.mean = ks.transpose() * alpha_;
  Eigen::MatrixXd v = llt_.matrixL().solve(ks);
  out.cov = prior - v.transpose() * v;
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  for (int a = 0; a < p; ++a) out.cov(a, a) = clamp_variance(out.cov(a, a));
  return out;
}

PosteriorGaussian mogp_posterior_full(const LmcModel& model, const ObservationSet& obs,
                                      const Eigen::Ref<const Eigen::VectorXd>& x_star) {
  return MogpSolver(model, obs).predict_full(x_star);
}

PosteriorGaussian mogp_posterior_partial(const LmcModel& model, const ObservationSet& obs,
                                         const Eigen::Ref<const Eigen::VectorXd>& x_star,
                                         int p_star) {
  return MogpSolver(model, obs).predict_partial(x_star, p_star);
}

double log_marginal_likelihood(const LmcModel& model, const ObservationSet& obs) {
  return MogpSolver(model, obs).lml();
}

void ParamSpace::validate() const {
  proto.validate();
  for (const auto& k : proto.kernels)
    if (k.family == KernelFamily::SqExpMatrix)
      throw SpecError("matrix-lengthscale kernels are not supported for hyperparameter inference");
}

int ParamSpace::dim() const {
  const int l = proto.latents, p = proto.channels;
  return 2 * l + (include_w ? p * l : 0) + p;
}

Eigen::VectorXd ParamSpace::pack(const LmcModel& m) const {
  const int l = proto.latents, p = proto.channels;
  Eigen::VectorXd theta(dim());
  for (int i = 0; i < l; ++i) theta[i] = std::log(m.kernels[i].variance);
  for (int i = 0; i < l; ++i) theta[l + i] = std::log(m.kernels[i].lengthscale);
  int off = 2 * l;
  if (include_w) {
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < l; ++b) theta[off + a * l + b] = m.w(a, b);
    off += p * l;
  }
  for (int a = 0; a < p; ++a) theta[off + a] = std::log(m.noise_vars[a]);
  return theta;
}

LmcModel ParamSpace::unpack(const Eigen::VectorXd& theta) const {
  if (theta.size() != dim()) throw InputError("parameter vector has wrong length");
  const int l = proto.latents, p = proto.channels;
  LmcModel m = proto;
  for (int i = 0; i < l; ++i) m.kernels[i].variance = std::exp(theta[i]);
  for (int i = 0; i < l; ++i) m.kernels[i].lengthscale = std::exp(theta[l + i]);
  int off = 2 * l;
  if (include_w) {
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < l; ++b) m.w(a, b) = theta[off + a * l + b];
    off += p * l;
  }
  for (int a = 0; a < p; ++a) m.noise_vars[a] = std::exp(theta[off + a]);
  return m;
}

LmlGradient::LmlGradient(ParamSpace space, const ObservationSet& obs) : space_(std::move(space)) {
  space_.validate();
  obs.validate();
  if (obs.channels != space_.proto.channels)
    throw InputError("observation set channel count does not match model");
  if (obs.n_sum() < 1) throw InputError("log marginal likelihood needs at least one observation");
  const int n = obs.n_sum();
  dist2_.resize(n, n);
  entry_p_.resize(n);
  y_.resize(n);
  for (int i = 0; i < n; ++i) {
    entry_p_[i] = obs.entries[i].channel;
    y_[i] = obs.entries[i].value;
  }
  for (int i = 0; i < n; ++i) {
    dist2_(i, i) = 0.0;
    for (int j = 0; j < i; ++j) {
      double d2 =
          (obs.inputs.row(obs.entries[i].input) - obs.inputs.row(obs.entries[j].input)).squaredNorm();
      dist2_(i, j) = d2;
      dist2_(j, i) = d2;
    }
  }
  dist_ = dist2_.array().sqrt();
}

double LmlGradient::value(const Eigen::VectorXd& theta) const { return eval(theta, nullptr); }

double LmlGradient::value_and_grad(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
  grad.resize(space_.dim());
  return eval(theta, &grad);
}

double LmlGradient::eval(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  const LmcModel m = space_.unpack(theta);
  const int n = int(y_.size());
  const int nl = m.latents, np = m.channels;

  // Per-latent gram pieces: g = kernel matrix, dg = d(kernel)/d(log lengthscale).
  std::vector<Eigen::MatrixXd> gs(nl), dgs(grad ? nl : 0);
  for (int l = 0; l < nl; ++l) {
    const auto& k = m.kernels[l];
    if (k.family == KernelFamily::Matern52) {
      const double c = std::sqrt(5.0) / k.lengthscale;
      Eigen::ArrayXXd t = dist_.array() * c;
      Eigen::ArrayXXd e = (-t).exp();
      gs[l] = (k.variance * (1.0 + t + t.square() / 3.0) * e).matrix();
      if (grad) dgs[l] = (k.variance / 3.0 * t.square() * (1.0 + t) * e).matrix();
    } else {
      Eigen::ArrayXXd t = dist2_.array() / k.lengthscale;
      Eigen::ArrayXXd g = k.variance * (-t).exp();
      gs[l] = g.matrix();
      if (grad) dgs[l] = (g * t).matrix();
    }
  }

  Eigen::MatrixXd kmat = Eigen::MatrixXd::Zero(n, n);
  std::vector<Eigen::VectorXd> mix(nl);  // mix[l][i] = W(p_i, l)
  for (int l = 0; l < nl; ++l) {
    Eigen::VectorXd a(n);
    for (int i = 0; i < n; ++i) a[i] = m.w(entry_p_[i], l);
    kmat.array() += (a * a.transpose()).array() * gs[l].array();
    mix[l] = std::move(a);
  }
  for (int i = 0; i < n; ++i) kmat(i, i) += m.noise_vars[entry_p_[i]];

  auto llt = factorize_with_jitter(std::move(kmat), nullptr);
  Eigen::VectorXd alpha = llt.solve(y_);
  const double lml = -0.5 * y_.dot(alpha) - 0.5 * log_det_from_llt(llt) - 0.5 * n * kLog2Pi;
  if (!grad) return lml;

  Eigen::MatrixXd kinv = Eigen::MatrixXd::Identity(n, n);
  llt.solveInPlace(kinv);
  Eigen::MatrixXd mm = alpha * alpha.transpose() - kinv;

  Eigen::VectorXd& g = *grad;
  g.setZero();
  const int woff = 2 * nl;
  const int noff = woff + (space_.include_w ? np * nl : 0);
  for (int l = 0; l < nl; ++l) {
    Eigen::VectorXd u = mm.cwiseProduct(gs[l]) * mix[l];
    g[l] = 0.5 * mix[l].dot(u);
    g[nl + l] = 0.5 * mix[l].dot(mm.cwiseProduct(dgs[l]) * mix[l]);
    if (space_.include_w)
      for (int i = 0; i < n; ++i) g[woff + entry_p_[i] * nl + l] += u[i];
  }
  for (int i = 0; i < n; ++i) g[noff + entry_p_[i]] += 0.5 * mm(i, i) * m.noise_vars[entry_p_[i]];
  return lml;
}

Eigen::VectorXd lml_gradient(const LmcModel& model, const ObservationSet& obs, bool include_w) {
  ParamSpace space{model, include_w};
  LmlGradient ctx(space, obs);
  Eigen::VectorXd g;
  ctx.value_and_grad(space.pack(model), g);
  return g;
}

}  // namespace salmo

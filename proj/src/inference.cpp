#include "salmo/inference.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace salmo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lgamma_safe(double a) { return std::lgamma(a); }

// Gamma(alpha, rate beta) log density evaluated at x = exp(t), including the
// log-transform Jacobian:  log p(x) + log x.
double gamma_log_density_uncon(const GammaParams& g, double t, double* dt) {
  double x = std::exp(t);
  if (dt) *dt = g.alpha - g.beta * x;
  return g.alpha * std::log(g.beta) - lgamma_safe(g.alpha) + g.alpha * t - g.beta * x;
}

}  // namespace

void HyperPrior::validate() const {
  for (const auto& g : {kernel_variance, kernel_lengthscale, noise_variance})
    if (!(g.alpha > 0.0) || !(g.beta > 0.0))
      throw SpecError("gamma prior parameters must be positive");
  if (!(w_stddev > 0.0)) throw SpecError("mixing-entry prior stddev must be positive");
}

double HyperPrior::log_density(const ParamSpace& space, const Eigen::VectorXd& theta,
                               Eigen::VectorXd* grad) const {
  const int nl = space.proto.latents, np = space.proto.channels;
  if (theta.size() != space.dim()) throw InputError("prior: parameter vector has wrong length");
  if (grad) grad->resize(space.dim());
  double lp = 0.0;
  double d = 0.0;
  for (int l = 0; l < nl; ++l) {
    lp += gamma_log_density_uncon(kernel_variance, theta[l], grad ? &d : nullptr);
    if (grad) (*grad)[l] = d;
  }
  for (int l = 0; l < nl; ++l) {
    lp += gamma_log_density_uncon(kernel_lengthscale, theta[nl + l], grad ? &d : nullptr);
    if (grad) (*grad)[nl + l] = d;
  }
  int off = 2 * nl;
  if (space.include_w) {
    const double inv_var = 1.0 / (w_stddev * w_stddev);
    for (int i = 0; i < np * nl; ++i) {
      double w = theta[off + i];
      lp += -0.5 * w * w * inv_var - std::log(w_stddev) - 0.5 * std::log(2.0 * M_PI);
      if (grad) (*grad)[off + i] = -w * inv_var;
    }
    off += np * nl;
  }
  for (int p = 0; p < np; ++p) {
    lp += gamma_log_density_uncon(noise_variance, theta[off + p], grad ? &d : nullptr);
    if (grad) (*grad)[off + p] = d;
  }
  return lp;
}

Eigen::VectorXd HyperPrior::draw(const ParamSpace& space, Rng& rng) const {
  const int nl = space.proto.latents, np = space.proto.channels;
  Eigen::VectorXd theta(space.dim());
  for (int l = 0; l < nl; ++l)
    theta[l] = std::log(rng.gamma(kernel_variance.alpha, kernel_variance.beta));
  for (int l = 0; l < nl; ++l)
    theta[nl + l] = std::log(rng.gamma(kernel_lengthscale.alpha, kernel_lengthscale.beta));
  int off = 2 * nl;
  if (space.include_w) {
    for (int i = 0; i < np * nl; ++i) theta[off + i] = rng.normal(0.0, w_stddev);
    off += np * nl;
  }
  for (int p = 0; p < np; ++p)
    theta[off + p] = std::log(rng.gamma(noise_variance.alpha, noise_variance.beta));
  return theta;
}

void HmcSettings::validate() const {
  if (num_results < 1 || burn_in < 1 || thin < 1 || leapfrog_steps < 1)
    throw SpecError("hmc settings: all counts must be >= 1");
  if (!(step_size > 0.0)) throw SpecError("hmc settings: step size must be positive");
  if (!(target_accept > 0.0) || !(target_accept < 1.0))
    throw SpecError("hmc settings: target acceptance must lie in (0, 1)");
  if (!(adapt_fraction >= 0.0) || !(adapt_fraction <= 1.0))
    throw SpecError("hmc settings: adaptation fraction must lie in [0, 1]");
}

std::vector<Eigen::VectorXd> hmc_chain(const LogDensityTarget& target, Eigen::VectorXd q0,
                                       const HmcSettings& settings, HmcDiagnostics* diag) {
  settings.validate();
  const int dim = int(q0.size());
  Eigen::VectorXd mass = settings.mass_diag;
  if (mass.size() == 0) mass = Eigen::VectorXd::Ones(dim);
  if (mass.size() != dim || (mass.array() <= 0.0).any())
    throw SpecError("hmc settings: mass diagonal must be positive and match dimension");
  Eigen::VectorXd mass_sqrt = mass.array().sqrt();
  Eigen::VectorXd mass_inv = mass.array().inverse();

  Rng rng(settings.seed);
  Eigen::VectorXd grad(dim), q = std::move(q0);
  double logp = target(q, grad);
  if (!std::isfinite(logp))
    throw InferenceError("hmc: initial point has non-finite log density");

  const int total = settings.burn_in + settings.thin * settings.num_results;
  const int adapt_steps = int(settings.adapt_fraction * settings.burn_in);
  // Dual averaging (target acceptance) with the usual constants.
  const double mu = std::log(10.0 * settings.step_size);
  const double da_gamma = 0.05, da_t0 = 10.0, da_kappa = 0.75;
  double h_bar = 0.0, log_eps_bar = std::log(settings.step_size);
  double eps = settings.step_size;

  std::vector<Eigen::VectorXd> samples;
  samples.reserve(settings.num_results);
  long accepts = 0;
  int divergences = 0;

  for (int t = 0; t < total; ++t) {
    Eigen::VectorXd p(dim);
    for (int i = 0; i < dim; ++i) p[i] = mass_sqrt[i] * rng.normal();
    const double h0 = -logp + 0.5 * p.dot(mass_inv.cwiseProduct(p));

    Eigen::VectorXd qn = q, gn = grad, pn = p;
    double logpn = logp;
    bool divergent = false;
    pn += 0.5 * eps * gn;
    for (int s = 0; s < settings.leapfrog_steps; ++s) {
      qn += eps * mass_inv.cwiseProduct(pn);
      logpn = target(qn, gn);
      if (!std::isfinite(logpn) || !gn.allFinite()) {
        divergent = true;
        break;
      }
      pn += (s + 1 < settings.leapfrog_steps ? eps : 0.5 * eps) * gn;
    }
    double accept_prob = 0.0;
    if (!divergent) {
      const double h1 = -logpn + 0.5 * pn.dot(mass_inv.cwiseProduct(pn));
      if (std::isfinite(h1)) accept_prob = std::min(1.0, std::exp(h0 - h1));
      else divergent = true;
    }
    if (divergent) ++divergences;
    const double u = rng.uniform();
    if (!divergent && u < accept_prob) {
      q.swap(qn);
      grad.swap(gn);
      logp = logpn;
      ++accepts;
    }
    if (t < adapt_steps) {
      const double m = t + 1;
      h_bar = (1.0 - 1.0 / (m + da_t0)) * h_bar +
              (settings.target_accept - accept_prob) / (m + da_t0);
      const double log_eps = mu - std::sqrt(m) / da_gamma * h_bar;
      const double eta = std::pow(m, -da_kappa);
      log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar;
      eps = std::exp(log_eps);
      if (t + 1 == adapt_steps) eps = std::exp(log_eps_bar);
    }
    if (t >= settings.burn_in && (t - settings.burn_in + 1) % settings.thin == 0)
      samples.push_back(q);
  }

  if (accepts == 0) {
    std::ostringstream msg;
    msg << "hmc: every proposal rejected (acceptance rate 0 over " << total
        << " transitions, " << divergences << " divergent)";
    throw InferenceError(msg.str());
  }
  if (diag) {
    diag->accept_rate = double(accepts) / double(total);
    diag->divergences = divergences;
    diag->final_step_size = eps;
  }
  return samples;
}

std::vector<Eigen::VectorXd> hmc_sample(const ParamSpace& space, const ObservationSet& obs,
                                        const HyperPrior& prior, const HmcSettings& settings,
                                        const Eigen::VectorXd& init, HmcDiagnostics* diag) {
  prior.validate();
  LmlGradient lml(space, obs);
  Eigen::VectorXd prior_grad;
  auto target = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) -> double {
    double lp;
    try {
      lp = lml.value_and_grad(theta, grad);
    } catch (const NumericError&) {
      grad.setZero(theta.size());
      return kNegInf;
    }
    lp += prior.log_density(space, theta, &prior_grad);
    grad += prior_grad;
    return lp;
  };
  return hmc_chain(target, init, settings, diag);
}

namespace {

// Minimal L-BFGS (two-loop recursion) with Armijo backtracking, minimizing f.
// Evaluations that throw NumericError are treated as +inf.
class LbfgsMinimizer {
 public:
  using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

  static bool minimize(const Objective& f, Eigen::VectorXd& x, double& fx, int max_iters = 200) {
    const int dim = int(x.size());
    const int history = 8;
    std::vector<Eigen::VectorXd> s_list, y_list;
    std::vector<double> rho_list;
    Eigen::VectorXd g(dim), g_new(dim), x_new(dim);
    try {
      fx = f(x, g);
    } catch (const NumericError&) {
      return false;
    }
    if (!std::isfinite(fx)) return false;

    for (int it = 0; it < max_iters; ++it) {
      if (g.lpNorm<Eigen::Infinity>() < 1e-6 * std::max(1.0, std::abs(fx))) return true;

      // Two-loop recursion for the search direction.
      Eigen::VectorXd d = -g;
      const int k = int(s_list.size());
      std::vector<double> alpha(k);
      for (int i = k - 1; i >= 0; --i) {
        alpha[i] = rho_list[i] * s_list[i].dot(d);
        d -= alpha[i] * y_list[i];
      }
      if (k > 0) {
        const double gamma = s_list.back().dot(y_list.back()) / y_list.back().squaredNorm();
        d *= gamma;
      }
      for (int i = 0; i < k; ++i) {
        const double beta = rho_list[i] * y_list[i].dot(d);
        d += (alpha[i] - beta) * s_list[i];
      }
      double dir_deriv = g.dot(d);
      if (!(dir_deriv < 0.0)) {
        d = -g;
        dir_deriv = -g.squaredNorm();
      }

      double step = 1.0;
      bool moved = false;
      for (int ls = 0; ls < 40; ++ls) {
        x_new = x + step * d;
        double f_new;
        try {
          f_new = f(x_new, g_new);
        } catch (const NumericError&) {
          f_new = std::numeric_limits<double>::infinity();
        }
        if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * dir_deriv) {
          Eigen::VectorXd s = x_new - x;
          Eigen::VectorXd yv = g_new - g;
          const double sy = s.dot(yv);
          if (sy > 1e-12 * s.norm() * yv.norm()) {
            s_list.push_back(s);
            y_list.push_back(yv);
            rho_list.push_back(1.0 / sy);
            if (int(s_list.size()) > history) {
              s_list.erase(s_list.begin());
              y_list.erase(y_list.begin());
              rho_list.erase(rho_list.begin());
            }
          }
          x = x_new;
          fx = f_new;
          g = g_new;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) return true;  // no acceptable step left; report current point
    }
    return true;
  }
};

}  // namespace

Eigen::VectorXd optimize_hyperparameters(const ParamSpace& space, const ObservationSet& obs,
                                         const HyperPrior& prior, const Eigen::VectorXd& init,
                                         int restarts, std::uint64_t seed) {
  if (restarts < 1) throw InputError("optimize_hyperparameters: restarts must be >= 1");
  prior.validate();
  LmlGradient lml(space, obs);
  auto objective = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) -> double {
    double v = lml.value_and_grad(theta, grad);
    grad = -grad;
    return -v;
  };

  Rng rng(seed);
  Eigen::VectorXd best;
  double best_f = std::numeric_limits<double>::infinity();
  int usable = 0;
  for (int r = 0; r < restarts; ++r) {
    Eigen::VectorXd x = (r == 0) ? init : prior.draw(space, rng);
    double fx;
    if (!LbfgsMinimizer::minimize(objective, x, fx)) continue;
    ++usable;
    if (fx < best_f) {
      best_f = fx;
      best = x;
    }
  }
  if (usable == 0)
    throw InferenceError("optimize_hyperparameters: every restart failed numerically");
  return best;
}

PosteriorGaussian mixture_moment_match(const std::vector<PosteriorGaussian>& components) {
  if (components.empty()) throw InputError("mixture_moment_match: needs at least one component");
  const auto dim = components[0].mean.size();
  for (const auto& c : components)
    if (c.mean.size() != dim || c.cov.rows() != dim || c.cov.cols() != dim)
      throw InputError("mixture_moment_match: component dimensions differ");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& c : components) {
    mean += c.mean;
    second += c.cov + c.mean * c.mean.transpose();
  }
  mean /= double(components.size());
  second /= double(components.size());
  PosteriorGaussian out;
  out.mean = mean;
  out.cov = second - mean * mean.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

}  // namespace salmo

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "salmo/gp.hpp"
#include "salmo/rng.hpp"

using namespace salmo;

namespace {

LmcModel random_lmc(Rng& rng, int channels, int latents) {
  LmcModel m;
  m.channels = channels;
  m.latents = latents;
  for (int l = 0; l < latents; ++l) {
    const double var = rng.uniform(0.3, 2.0);
    const double ls = rng.uniform(0.5, 2.0);
    m.kernels.push_back(rng.uniform() < 0.5 ? KernelSpec::matern52(var, ls)
                                            : KernelSpec::sq_exp_iso(var, ls));
  }
  m.w = Eigen::MatrixXd::Zero(channels, latents);
  for (int p = 0; p < channels; ++p) {
    for (int l = 0; l < latents; ++l) m.w(p, l) = rng.normal();
  }
  m.noise_vars = Eigen::VectorXd::Zero(channels);
  for (int p = 0; p < channels; ++p) m.noise_vars(p) = rng.uniform(0.05, 0.5);
  return m;
}

ObservationSet random_obs(Rng& rng, const LmcModel& m, int n_inputs, int dim,
                          bool fully_observed) {
  ObservationSet obs;
  obs.channels = m.channels;
  obs.inputs = Eigen::MatrixXd::Zero(n_inputs, dim);
  for (int i = 0; i < n_inputs; ++i) {
    for (int d = 0; d < dim; ++d) obs.inputs(i, d) = rng.uniform(-2, 2);
  }
  for (int i = 0; i < n_inputs; ++i) {
    for (int p = 0; p < m.channels; ++p) {
      if (fully_observed || rng.uniform() < 0.7) {
        obs.entries.push_back({i, p, rng.normal()});
      }
    }
  }
  if (obs.entries.empty()) obs.entries.push_back({0, 0, rng.normal()});
  return obs;
}

// Direct joint-Gaussian conditioning oracle: no solver machinery, one dense
// inverse over the assembled joint covariance.
PosteriorGaussian oracle_posterior(const LmcModel& m, const ObservationSet& obs,
                                   const std::vector<IndexedPoint>& stars) {
  std::vector<IndexedPoint> opts;
  Eigen::VectorXd y(obs.entries.size());
  for (size_t i = 0; i < obs.entries.size(); ++i) {
    opts.push_back({obs.inputs.row(obs.entries[i].input).transpose(), obs.entries[i].channel});
    y(i) = obs.entries[i].value;
  }
  Eigen::MatrixXd koo = assemble_gram(m, opts, opts);
  for (size_t i = 0; i < opts.size(); ++i) koo(i, i) += m.noise_vars(opts[i].channel);
  Eigen::MatrixXd kso = assemble_gram(m, stars, opts);
  Eigen::MatrixXd kss = assemble_gram(m, stars, stars);
  Eigen::MatrixXd kinv = koo.inverse();
  PosteriorGaussian post;
  post.mean = kso * kinv * y;
  post.cov = kss - kso * kinv * kso.transpose();
  return post;
}

}  // namespace

TEST_CASE("partial and full posteriors match joint conditioning") {
  Rng rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    const int p = 1 + int(rng.uniform_int(3));
    const int l = 1 + int(rng.uniform_int(3));
    const int d = 1 + int(rng.uniform_int(3));
    const int n = 1 + int(rng.uniform_int(6));
    LmcModel m = random_lmc(rng, p, l);
    ObservationSet obs = random_obs(rng, m, n, d, false);
    Eigen::VectorXd x_star(d);
    for (int t = 0; t < d; ++t) x_star(t) = rng.uniform(-2, 2);

    std::vector<IndexedPoint> stars;
    for (int q = 0; q < p; ++q) stars.push_back({x_star, q});
    PosteriorGaussian oracle = oracle_posterior(m, obs, stars);
    PosteriorGaussian full = mogp_posterior_full(m, obs, x_star);
    CHECK((full.mean - oracle.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((full.cov - oracle.cov).cwiseAbs().maxCoeff() < 1e-8);

    const int q = int(rng.uniform_int(p));
    PosteriorGaussian part = mogp_posterior_partial(m, obs, x_star, q);
    CHECK(part.mean.size() == 1);
    CHECK(std::abs(part.mean(0) - oracle.mean(q)) < 1e-8);
    CHECK(std::abs(part.cov(0, 0) - oracle.cov(q, q)) < 1e-8);
  }
}

TEST_CASE("posteriors are invariant to entry order") {
  Rng rng(7);
  LmcModel m = random_lmc(rng, 3, 2);
  ObservationSet obs = random_obs(rng, m, 5, 2, false);
  Eigen::VectorXd x_star(2);
  x_star << 0.3, -0.8;
  PosteriorGaussian base = mogp_posterior_full(m, obs, x_star);
  ObservationSet shuffled = obs;
  for (int round = 0; round < 5; ++round) {
    for (size_t i = shuffled.entries.size(); i > 1; --i) {
      std::swap(shuffled.entries[i - 1], shuffled.entries[rng.uniform_int(i)]);
    }
    PosteriorGaussian post = mogp_posterior_full(m, shuffled, x_star);
    CHECK((post.mean - base.mean).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((post.cov - base.cov).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(log_marginal_likelihood(m, shuffled) ==
          doctest::Approx(log_marginal_likelihood(m, obs)).epsilon(1e-12));
  }
}

TEST_CASE("identity mixing reduces to stacked single output models") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const int p = 1 + int(rng.uniform_int(3));
    LmcModel m = random_lmc(rng, p, p);
    m.w = Eigen::MatrixXd::Identity(p, p);
    const int n = 4 + int(rng.uniform_int(3));
    ObservationSet obs = random_obs(rng, m, n, 2, true);
    Eigen::VectorXd x_star(2);
    x_star << rng.uniform(-2, 2), rng.uniform(-2, 2);

    double lml_sum = 0.0;
    PosteriorGaussian full = mogp_posterior_full(m, obs, x_star);
    for (int q = 0; q < p; ++q) {
      Eigen::VectorXd yq(n);
      for (const auto& e : obs.entries) {
        if (e.channel == q) yq(e.input) = e.value;
      }
      PosteriorGaussian single = so_posterior(m.kernels[q], obs.inputs, yq,
                                              m.noise_vars(q), x_star);
      CHECK(std::abs(full.mean(q) - single.mean(0)) < 1e-8);
      CHECK(std::abs(full.cov(q, q) - single.cov(0, 0)) < 1e-8);
      // off-diagonal cross-covariances vanish
      for (int q2 = 0; q2 < p; ++q2) {
        if (q2 != q) CHECK(std::abs(full.cov(q, q2)) < 1e-8);
      }
      const double k_n = n;
      Eigen::MatrixXd gram(n, n);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          gram(i, j) = eval_kernel(m.kernels[q], obs.inputs.row(i).transpose(),
                                   obs.inputs.row(j).transpose());
        }
      }
      gram.diagonal().array() += m.noise_vars(q);
      lml_sum += -0.5 * (yq.dot(gram.inverse() * yq) + std::log(gram.determinant()) +
                         k_n * std::log(2.0 * M_PI));
    }
    CHECK(log_marginal_likelihood(m, obs) == doctest::Approx(lml_sum).epsilon(1e-8));
  }
}

TEST_CASE("marginal likelihood equals the direct density") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    LmcModel m = random_lmc(rng, 2, 2);
    ObservationSet obs = random_obs(rng, m, 4, 1, false);
    std::vector<IndexedPoint> pts;
    Eigen::VectorXd y(obs.entries.size());
    for (size_t i = 0; i < obs.entries.size(); ++i) {
      pts.push_back({obs.inputs.row(obs.entries[i].input).transpose(), obs.entries[i].channel});
      y(i) = obs.entries[i].value;
    }
    Eigen::MatrixXd k = assemble_gram(m, pts, pts);
    for (size_t i = 0; i < pts.size(); ++i) k(i, i) += m.noise_vars(pts[i].channel);
    const double n = double(pts.size());
    const double direct =
        -0.5 * (y.dot(k.inverse() * y) + std::log(k.determinant()) + n * std::log(2.0 * M_PI));
    CHECK(log_marginal_likelihood(m, obs) == doctest::Approx(direct).epsilon(1e-10));
  }
}

TEST_CASE("marginal likelihood of one standard observation") {
  // Unit prior variance plus unit noise: log N(0 | 0, 2) = -0.5 log(4 pi).
  LmcModel m;
  m.channels = 1;
  m.latents = 1;
  m.kernels = {KernelSpec::sq_exp_iso(1.0, 1.0)};
  m.w = Eigen::MatrixXd::Ones(1, 1);
  m.noise_vars = Eigen::VectorXd::Ones(1);
  ObservationSet obs;
  obs.channels = 1;
  obs.inputs = Eigen::MatrixXd::Zero(1, 1);
  obs.entries = {{0, 0, 0.0}};
  CHECK(log_marginal_likelihood(m, obs) ==
        doctest::Approx(-0.5 * std::log(4.0 * M_PI)).epsilon(1e-14));
}

TEST_CASE("gradient matches central finite differences") {
  Rng rng(29);
  for (int trial = 0; trial < 8; ++trial) {
    const int p = 1 + int(rng.uniform_int(2));
    const int l = 1 + int(rng.uniform_int(2));
    LmcModel m = random_lmc(rng, p, l);
    ObservationSet obs = random_obs(rng, m, 4, 2, false);
    ParamSpace space{m, true};
    LmlGradient lg(space, obs);
    Eigen::VectorXd theta = space.pack(m);
    Eigen::VectorXd grad(space.dim());
    lg.value_and_grad(theta, grad);
    const double h = 1e-6;
    for (int j = 0; j < space.dim(); ++j) {
      Eigen::VectorXd tp = theta, tm = theta;
      tp(j) += h;
      tm(j) -= h;
      const double fd = (lg.value(tp) - lg.value(tm)) / (2.0 * h);
      CHECK(std::abs(grad(j) - fd) < 1e-4);
    }
  }
}

TEST_CASE("gradient excludes the mixing matrix when frozen") {
  Rng rng(31);
  LmcModel m = random_lmc(rng, 2, 2);
  ObservationSet obs = random_obs(rng, m, 4, 1, true);
  ParamSpace with{m, true};
  ParamSpace without{m, false};
  CHECK(with.dim() == without.dim() + 4);
  Eigen::VectorXd g_with = lml_gradient(m, obs, true);
  Eigen::VectorXd g_without = lml_gradient(m, obs, false);
  CHECK(g_with.size() == with.dim());
  CHECK(g_without.size() == without.dim());
  // shared coordinates agree: kernel block leading, noise block trailing
  CHECK((g_with.head(4) - g_without.head(4)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((g_with.tail(2) - g_without.tail(2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pack and unpack round trip") {
  Rng rng(37);
  LmcModel m = random_lmc(rng, 3, 2);
  ParamSpace space{m, true};
  Eigen::VectorXd theta = space.pack(m);
  CHECK(theta.size() == space.dim());
  LmcModel back = space.unpack(theta);
  CHECK((back.w - m.w).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((back.noise_vars - m.noise_vars).cwiseAbs().maxCoeff() < 1e-12);
  for (int l = 0; l < m.latents; ++l) {
    CHECK(back.kernels[l].variance == doctest::Approx(m.kernels[l].variance).epsilon(1e-12));
    CHECK(back.kernels[l].lengthscale == doctest::Approx(m.kernels[l].lengthscale).epsilon(1e-12));
  }
}

TEST_CASE("near singular grams are rescued by escalating jitter") {
  LmcModel m;
  m.channels = 1;
  m.latents = 1;
  m.kernels = {KernelSpec::sq_exp_iso(1.0, 1.0)};
  m.w = Eigen::MatrixXd::Ones(1, 1);
  m.noise_vars = Eigen::VectorXd::Constant(1, 1e-16);
  ObservationSet obs;
  obs.channels = 1;
  obs.inputs = Eigen::MatrixXd::Zero(4, 1);  // four identical inputs
  obs.entries = {{0, 0, 0.1}, {1, 0, 0.1}, {2, 0, 0.1}, {3, 0, 0.1}};
  MogpSolver solver(m, obs);
  CHECK(solver.jitter_used() > 0.0);
  Eigen::VectorXd x_star = Eigen::VectorXd::Constant(1, 0.5);
  PosteriorGaussian post = solver.predict_partial(x_star, 0);
  CHECK(std::isfinite(post.mean(0)));
  CHECK(std::isfinite(post.cov(0, 0)));
  CHECK(post.cov(0, 0) >= 0.0);

  // The raw gram itself carries no jitter: it is exactly singular here.
  std::vector<IndexedPoint> pts(4, IndexedPoint{Eigen::VectorXd::Zero(1), 0});
  Eigen::MatrixXd gram = assemble_gram(m, pts, pts);
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  CHECK(llt.info() != Eigen::Success);
}

TEST_CASE("observation validation rejects duplicates and bad indices") {
  ObservationSet obs;
  obs.channels = 2;
  obs.inputs = Eigen::MatrixXd::Zero(2, 1);
  obs.entries = {{0, 0, 1.0}, {0, 0, 2.0}};
  CHECK_THROWS_AS(obs.validate(), InputError);
  obs.entries = {{0, 3, 1.0}};
  CHECK_THROWS_AS(obs.validate(), InputError);
  obs.entries = {{5, 0, 1.0}};
  CHECK_THROWS_AS(obs.validate(), InputError);
  obs.entries = {{0, 0, 1.0}, {0, 1, 2.0}, {1, 1, 0.5}};
  CHECK_NOTHROW(obs.validate());
  CHECK(obs.n_sum() == 3);
  CHECK(!obs.fully_observed());
}

TEST_CASE("observing more data never inflates predictive variance") {
  Rng rng(43);
  LmcModel m = random_lmc(rng, 2, 2);
  Eigen::VectorXd x_star(1);
  x_star << 0.25;
  ObservationSet obs;
  obs.channels = 2;
  obs.inputs = Eigen::MatrixXd::Zero(8, 1);
  for (int i = 0; i < 8; ++i) obs.inputs(i, 0) = rng.uniform(-2, 2);
  double prev0 = std::numeric_limits<double>::infinity();
  double prev1 = std::numeric_limits<double>::infinity();
  double prev_det = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 8; ++i) {
    obs.entries.push_back({i, int(rng.uniform_int(2)), rng.normal()});
    PosteriorGaussian full = mogp_posterior_full(m, obs, x_star);
    const double det = full.cov.determinant();
    CHECK(full.cov(0, 0) <= prev0 + 1e-10);
    CHECK(full.cov(1, 1) <= prev1 + 1e-10);
    CHECK(det <= prev_det + 1e-10);
    prev0 = full.cov(0, 0);
    prev1 = full.cov(1, 1);
    prev_det = det;
  }
  // and every posterior sits below the prior
  ObservationSet empty;
  empty.channels = 2;
  empty.inputs = Eigen::MatrixXd::Zero(0, 1);
  PosteriorGaussian prior = mogp_posterior_full(m, empty, x_star);
  CHECK(prev0 <= prior.cov(0, 0) + 1e-12);
  CHECK(prev_det <= prior.cov.determinant() + 1e-12);
}

TEST_CASE("empty observation set returns the prior") {
  Rng rng(47);
  LmcModel m = random_lmc(rng, 2, 2);
  ObservationSet obs;
  obs.channels = 2;
  obs.inputs = Eigen::MatrixXd::Zero(0, 1);
  Eigen::VectorXd x_star(1);
  x_star << -0.4;
  PosteriorGaussian post = mogp_posterior_full(m, obs, x_star);
  CHECK(post.mean.cwiseAbs().maxCoeff() == 0.0);
  for (int p = 0; p < 2; ++p) {
    for (int q = 0; q < 2; ++q) {
      CHECK(post.cov(p, q) == doctest::Approx(lmc_cov(m, p, q, x_star, x_star)).epsilon(1e-14));
    }
  }
}

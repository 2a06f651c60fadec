#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "salmo/kernels.hpp"
#include "salmo/rng.hpp"

using namespace salmo;

namespace {

// Gauss-Hermite nodes/weights via the Golub-Welsch tridiagonal eigenproblem
// (physicists' convention, weight exp(-t^2)).
void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double off = std::sqrt(k / 2.0);
    j(k, k - 1) = off;
    j(k - 1, k) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  nodes.resize(n);
  weights.resize(n);
  for (int k = 0; k < n; ++k) {
    nodes[k] = es.eigenvalues()(k);
    const double v0 = es.eigenvectors()(0, k);
    weights[k] = std::sqrt(M_PI) * v0 * v0;
  }
}

double gaussian_pdf(const Eigen::VectorXd& d, const Eigen::MatrixXd& cov) {
  const int n = int(d.size());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
  const double q = d.dot(llt.solve(d));
  return std::exp(-0.5 * (n * std::log(2.0 * M_PI) + logdet + q));
}

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

}  // namespace

TEST_CASE("matern52 matches the closed form at unit arguments") {
  // (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated in extended precision.
  const long double s5 = std::sqrt((long double)5);
  const long double expect = (1.0L + s5 + 5.0L / 3.0L) * std::exp(-s5);
  CHECK(matern52_value(1.0, 1.0, 1.0) == doctest::Approx(double(expect)).epsilon(1e-14));
  CHECK(matern52_value(1.0L, 1.0L, 1.0L) == doctest::Approx(double(expect)).epsilon(1e-16));
}

TEST_CASE("matern52 random arguments against a long double oracle") {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const double r = rng.uniform(0.0, 5.0);
    const double var = rng.uniform(0.1, 3.0);
    const double ls = rng.uniform(0.2, 3.0);
    const long double t = std::sqrt((long double)5) * (long double)r / (long double)ls;
    const long double expect = (long double)var * (1.0L + t + t * t / 3.0L) * std::exp(-t);
    CHECK(matern52_value(r, var, ls) == doctest::Approx(double(expect)).epsilon(1e-13));
  }
}

TEST_CASE("squared exponential divides the squared distance by the lengthscale directly") {
  // k(r2 = lengthscale) must be variance / e; a 1/(2 l^2) parameterization
  // would give a different value, which this test is designed to catch.
  CHECK(sq_exp_iso_value(2.0, 1.5, 2.0) == doctest::Approx(1.5 / M_E).epsilon(1e-15));
  CHECK(sq_exp_iso_value(0.49, 3.0, 0.49) == doctest::Approx(3.0 / M_E).epsilon(1e-15));
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const double r2 = rng.uniform(0.0, 9.0);
    const double var = rng.uniform(0.1, 3.0);
    const double ls = rng.uniform(0.2, 3.0);
    CHECK(sq_exp_iso_value(r2, var, ls) ==
          doctest::Approx(var * std::exp(-r2 / ls)).epsilon(1e-14));
  }
}

TEST_CASE("zero lag returns the variance for every family") {
  Eigen::VectorXd x(2);
  x << 0.3, -1.2;
  CHECK(eval_kernel(KernelSpec::matern52(2.5, 0.7), x, x) == doctest::Approx(2.5));
  CHECK(eval_kernel(KernelSpec::sq_exp_iso(0.3, 2.0), x, x) == doctest::Approx(0.3));
  Eigen::MatrixXd m(2, 2);
  m << 2.0, 0.5, 0.5, 1.0;
  CHECK(eval_kernel(KernelSpec::sq_exp_matrix(1.7, m), x, x) == doctest::Approx(1.7));
}

TEST_CASE("matrix squared exponential matches its quadratic form") {
  Eigen::MatrixXd m(2, 2);
  m << 2.0, 0.5, 0.5, 1.0;
  KernelSpec k = KernelSpec::sq_exp_matrix(0.8, m);
  Rng rng(23);
  for (int i = 0; i < 50; ++i) {
    Eigen::VectorXd a(2), b(2);
    a << rng.uniform(-2, 2), rng.uniform(-2, 2);
    b << rng.uniform(-2, 2), rng.uniform(-2, 2);
    Eigen::VectorXd d = a - b;
    const double expect = 0.8 * std::exp(-0.5 * d.dot(m * d));
    CHECK(eval_kernel(k, a, b) == doctest::Approx(expect).epsilon(1e-14));
    CHECK(eval_kernel(k, a, b) == doctest::Approx(eval_kernel(k, b, a)).epsilon(1e-15));
  }
}

TEST_CASE("kernel values decay with distance") {
  Eigen::VectorXd origin = Eigen::VectorXd::Zero(1);
  double prev_m = 1e300, prev_s = 1e300;
  for (double r = 0.0; r < 4.0; r += 0.25) {
    Eigen::VectorXd x(1);
    x << r;
    const double vm = eval_kernel(KernelSpec::matern52(1.0, 0.8), origin, x);
    const double vs = eval_kernel(KernelSpec::sq_exp_iso(1.0, 0.8), origin, x);
    CHECK(vm < prev_m + 1e-15);
    CHECK(vs < prev_s + 1e-15);
    prev_m = vm;
    prev_s = vs;
  }
}

TEST_CASE("kernel validation rejects bad parameters") {
  CHECK_THROWS_AS(KernelSpec::matern52(0.0, 1.0).validate(), SpecError);
  CHECK_THROWS_AS(KernelSpec::matern52(1.0, -1.0).validate(), SpecError);
  CHECK_THROWS_AS(KernelSpec::sq_exp_iso(-0.1, 1.0).validate(), SpecError);
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;  // indefinite
  CHECK_THROWS_AS(KernelSpec::sq_exp_matrix(1.0, bad).validate(), SpecError);
  Eigen::MatrixXd asym(2, 2);
  asym << 1.0, 0.3, -0.3, 1.0;
  CHECK_THROWS_AS(KernelSpec::sq_exp_matrix(1.0, asym).validate(), SpecError);
}

TEST_CASE("lmc covariance equals the brute force sum over latents") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const int channels = 1 + int(rng.uniform_int(3));
    const int latents = 1 + int(rng.uniform_int(3));
    LmcModel m = random_lmc(rng, channels, latents);
    const int d = 1 + int(rng.uniform_int(3));
    Eigen::VectorXd x(d), x2(d);
    for (int t = 0; t < d; ++t) {
      x(t) = rng.uniform(-2, 2);
      x2(t) = rng.uniform(-2, 2);
    }
    for (int p = 0; p < channels; ++p) {
      for (int q = 0; q < channels; ++q) {
        double expect = 0.0;
        for (int l = 0; l < latents; ++l) {
          expect += m.w(p, l) * m.w(q, l) * eval_kernel(m.kernels[l], x, x2);
        }
        CHECK(lmc_cov(m, p, q, x, x2) == doctest::Approx(expect).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("lmc model validation") {
  Rng rng(3);
  LmcModel m = random_lmc(rng, 2, 2);
  SUBCASE("valid model passes") { CHECK_NOTHROW(m.validate()); }
  SUBCASE("kernel count must match latents") {
    m.kernels.pop_back();
    CHECK_THROWS_AS(m.validate(), SpecError);
  }
  SUBCASE("w shape must be channels x latents") {
    m.w = Eigen::MatrixXd::Zero(3, 2);
    CHECK_THROWS_AS(m.validate(), SpecError);
  }
  SUBCASE("noise must be positive") {
    m.noise_vars(0) = 0.0;
    CHECK_THROWS_AS(m.validate(), SpecError);
  }
}

TEST_CASE("gram blocks are symmetric and positive semidefinite with noise") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    LmcModel m = random_lmc(rng, 2 , 2);
    const int n = 8;
    std::vector<IndexedPoint> pts;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd x(2);
      x << rng.uniform(-2, 2), rng.uniform(-2, 2);
      pts.push_back({x, int(rng.uniform_int(2))});
    }
    Eigen::MatrixXd g = assemble_gram(m, pts, pts);
    CHECK((g - g.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::MatrixXd noisy = g;
    for (int i = 0; i < n; ++i) noisy(i, i) += m.noise_vars(pts[i].channel);
    Eigen::LLT<Eigen::MatrixXd> llt(noisy);
    CHECK(llt.info() == Eigen::Success);
    // rectangular blocks agree with elementwise evaluation
    std::vector<IndexedPoint> rows(pts.begin(), pts.begin() + 3);
    Eigen::MatrixXd block = assemble_gram(m, rows, pts);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < n; ++j) {
        CHECK(block(i, j) == doctest::Approx(lmc_cov(m, rows[i].channel, pts[j].channel,
                                                     rows[i].x, pts[j].x)).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("convolution covariance at zero lag in one dimension") {
  // One channel, one latent, unit weights and precisions: the closed form at
  // d = 0 is N(0 | 0, 3) = 1 / sqrt(6 pi).
  ConvProcessModel m;
  m.channels = 1;
  m.latents = 1;
  m.smoothing_precisions = {Eigen::MatrixXd::Identity(1, 1)};
  m.latent_precisions = {Eigen::MatrixXd::Identity(1, 1)};
  m.latent_scales = Eigen::VectorXd::Ones(1);
  m.w = Eigen::MatrixXd::Ones(1, 1);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(1);
  CHECK(conv_cov(m, 0, 0, x, x) == doctest::Approx(1.0 / std::sqrt(6.0 * M_PI)).epsilon(1e-14));
}

TEST_CASE("convolution covariance matches four dimensional quadrature") {
  // Two-dimensional inputs; the smoothing kernels are diagonal-precision
  // Gaussians so the double convolution factorizes into a product of
  // one-dimensional Gauss-Hermite sums over four axes:
  //   cov = E_{u ~ N(x, A_p^-1), u' ~ N(x', A_q^-1)} [ c N(u - u' | 0, L^-1) ].
  ConvProcessModel m;
  m.channels = 2;
  m.latents = 1;
  Eigen::MatrixXd a0 = Eigen::Vector2d(1.4, 2.2).asDiagonal();
  Eigen::MatrixXd a1 = Eigen::Vector2d(2.8, 1.1).asDiagonal();
  m.smoothing_precisions = {a0, a1};
  Eigen::MatrixXd lam(2, 2);
  lam << 1.9, 0.4, 0.4, 1.3;
  m.latent_precisions = {lam};
  m.latent_scales = Eigen::VectorXd::Constant(1, 0.9);
  m.w = Eigen::MatrixXd::Ones(2, 1) * 0.8;
  m.validate();

  std::vector<double> nodes, weights;
  gauss_hermite(24, nodes, weights);
  const Eigen::MatrixXd lam_cov = lam.inverse();

  Eigen::VectorXd x(2), x2(2);
  x << 0.4, -0.3;
  x2 << -0.2, 0.5;
  const double sd_u0 = std::sqrt(1.0 / a0(0, 0)), sd_u1 = std::sqrt(1.0 / a0(1, 1));
  const double sd_v0 = std::sqrt(1.0 / a1(0, 0)), sd_v1 = std::sqrt(1.0 / a1(1, 1));
  double total = 0.0;
  const double norm = std::pow(M_PI, -2.0);  // four axes of 1/sqrt(pi)
  for (size_t i = 0; i < nodes.size(); ++i) {
    const double u0 = x(0) + std::sqrt(2.0) * sd_u0 * nodes[i];
    for (size_t j = 0; j < nodes.size(); ++j) {
      const double u1 = x(1) + std::sqrt(2.0) * sd_u1 * nodes[j];
      for (size_t k = 0; k < nodes.size(); ++k) {
        const double v0 = x2(0) + std::sqrt(2.0) * sd_v0 * nodes[k];
        double inner = 0.0;
        for (size_t t = 0; t < nodes.size(); ++t) {
          const double v1 = x2(1) + std::sqrt(2.0) * sd_v1 * nodes[t];
          Eigen::VectorXd d(2);
          d << u0 - v0, u1 - v1;
          inner += weights[t] * gaussian_pdf(d, lam_cov);
        }
        total += weights[i] * weights[j] * weights[k] * inner;
      }
    }
  }
  const double quad = 0.8 * 0.8 * 0.9 * norm * total;
  CHECK(conv_cov(m, 0, 1, x, x2) == doctest::Approx(quad).epsilon(1e-4));
}

TEST_CASE("convolution covariance is symmetric in its arguments") {
  ConvProcessModel m;
  m.channels = 2;
  m.latents = 2;
  Eigen::MatrixXd a0(2, 2), a1(2, 2);
  a0 << 1.5, 0.2, 0.2, 2.0;
  a1 << 2.5, -0.3, -0.3, 1.2;
  m.smoothing_precisions = {a0, a1};
  Eigen::MatrixXd l0(2, 2), l1(2, 2);
  l0 << 1.0, 0.1, 0.1, 1.4;
  l1 << 2.2, 0.0, 0.0, 0.9;
  m.latent_precisions = {l0, l1};
  m.latent_scales = Eigen::VectorXd::Constant(2, 1.1);
  m.w = Eigen::MatrixXd(2, 2);
  m.w << 0.7, -0.4, 0.2, 1.1;
  m.validate();
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd x(2), x2(2);
    x << rng.uniform(-1, 1), rng.uniform(-1, 1);
    x2 << rng.uniform(-1, 1), rng.uniform(-1, 1);
    CHECK(conv_cov(m, 0, 1, x, x2) == doctest::Approx(conv_cov(m, 1, 0, x2, x)).epsilon(1e-13));
  }
}

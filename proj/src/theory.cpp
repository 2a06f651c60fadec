#include "salmo/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace salmo {
namespace {

constexpr double kSlackTol = 1e-9;

Eigen::LLT<Eigen::MatrixXd> llt_of(Eigen::MatrixXd m) {
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(sym);
  if (llt.info() != Eigen::Success) {
    throw NumericError("theory check: Cholesky factorization failed");
  }
  return llt;
}

// Predictive variances of every pool candidate for a noisy-observation
// conditioner on the selected subset.  Clamped at zero.
std::vector<double> partial_vars(const LmcModel& m, const std::vector<IndexedPoint>& pool,
                                 const std::vector<int>& given) {
  const int np = static_cast<int>(pool.size());
  std::vector<double> vars(np);
  for (int i = 0; i < np; ++i) {
    vars[i] = lmc_cov(m, pool[i].channel, pool[i].channel, pool[i].x, pool[i].x);
  }
  if (given.empty()) return vars;
  std::vector<IndexedPoint> s;
  s.reserve(given.size());
  for (int idx : given) s.push_back(pool[idx]);
  Eigen::MatrixXd kss = assemble_gram(m, s, s);
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    kss(i, i) += m.noise_vars(s[i].channel);
  }
  auto llt = llt_of(std::move(kss));
  Eigen::MatrixXd cross = assemble_gram(m, s, pool);
  Eigen::MatrixXd v = llt.matrixL().solve(cross);
  for (int i = 0; i < np; ++i) {
    vars[i] = std::max(0.0, vars[i] - v.col(i).squaredNorm());
  }
  return vars;
}

std::vector<IndexedPoint> all_channel_entries(const LmcModel& m, const Eigen::MatrixXd& x,
                                              const std::vector<int>& cols) {
  std::vector<IndexedPoint> out;
  out.reserve(cols.size() * m.channels);
  for (int idx : cols) {
    for (int p = 0; p < m.channels; ++p) {
      out.push_back({x.row(idx).transpose(), p});
    }
  }
  return out;
}

// Determinant of the P x P predictive covariance of each pool point given
// fully observed selections.  Clamped at zero.
std::vector<double> partial_dets(const LmcModel& m, const Eigen::MatrixXd& pool_x,
                                 const std::vector<int>& given) {
  const int np = static_cast<int>(pool_x.rows());
  const int pch = m.channels;
  std::vector<int> all(np);
  for (int i = 0; i < np; ++i) all[i] = i;
  std::vector<IndexedPoint> cand = all_channel_entries(m, pool_x, all);
  std::vector<double> dets(np);
  if (given.empty()) {
    for (int i = 0; i < np; ++i) {
      Eigen::MatrixXd prior = assemble_gram(
          m, {cand.begin() + i * pch, cand.begin() + (i + 1) * pch},
          {cand.begin() + i * pch, cand.begin() + (i + 1) * pch});
      dets[i] = std::max(0.0, prior.determinant());
    }
    return dets;
  }
  std::vector<IndexedPoint> s = all_channel_entries(m, pool_x, given);
  Eigen::MatrixXd kss = assemble_gram(m, s, s);
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    kss(i, i) += m.noise_vars(s[i].channel);
  }
  auto llt = llt_of(std::move(kss));
  Eigen::MatrixXd cross = assemble_gram(m, s, cand);
  Eigen::MatrixXd v = llt.matrixL().solve(cross);
  for (int i = 0; i < np; ++i) {
    std::vector<IndexedPoint> ci(cand.begin() + i * pch, cand.begin() + (i + 1) * pch);
    Eigen::MatrixXd prior = assemble_gram(m, ci, ci);
    Eigen::MatrixXd post = prior - v.middleCols(i * pch, pch).transpose() *
                                       v.middleCols(i * pch, pch);
    post = 0.5 * (post + post.transpose());
    dets[i] = std::max(0.0, post.determinant());
  }
  return dets;
}

void validate_initial(const std::vector<int>& initial, int pool_size, std::vector<char>* seen) {
  for (int idx : initial) {
    if (idx < 0 || idx >= pool_size) throw InputError("initial set index out of range");
    if ((*seen)[idx]) throw InputError("initial set repeats a pool index");
    (*seen)[idx] = 1;
  }
}

void validate_sequence(const std::vector<int>& sequence, int pool_size,
                       const std::vector<int>& initial) {
  if (sequence.empty()) throw InputError("query sequence must be non-empty");
  std::vector<char> seen(pool_size, 0);
  validate_initial(initial, pool_size, &seen);
  for (int idx : sequence) {
    if (idx < 0 || idx >= pool_size) throw InputError("query sequence index out of range");
    if (seen[idx]) throw InputError("query sequence repeats or overlaps the initial set");
    seen[idx] = 1;
  }
}

int argmax_excluding(const std::vector<double>& values, const std::vector<char>& taken) {
  int best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(values.size()); ++i) {
    if (taken[i]) continue;
    if (values[i] > best_v) {
      best_v = values[i];
      best = i;
    }
  }
  return best;
}

}  // namespace

BoundConstants bound_constants(const LmcModel& model) {
  model.validate();
  BoundConstants b;
  b.latents = model.latents;
  b.channels = model.channels;
  b.w_hat = model.w.cwiseAbs().maxCoeff();
  for (const auto& k : model.kernels) b.v_hat = std::max(b.v_hat, k.variance);
  b.psi = model.noise_vars.maxCoeff();
  const double a = model.latents * b.w_hat * b.w_hat * b.v_hat;
  if (a > 0.0) {
    b.c1 = a / std::log1p(a / b.psi);
    b.c2 = std::pow(a, model.channels) /
           std::log1p(std::pow(a / b.psi, model.channels));
  }
  return b;
}

double mutual_info_direct(const LmcModel& model, const std::vector<IndexedPoint>& points) {
  if (points.empty()) return 0.0;
  const int n = static_cast<int>(points.size());
  Eigen::MatrixXd gram = assemble_gram(model, points, points);
  Eigen::VectorXd inv_sd(n);
  for (int i = 0; i < n; ++i) {
    inv_sd(i) = 1.0 / std::sqrt(model.noise_vars(points[i].channel));
  }
  Eigen::MatrixXd s = inv_sd.asDiagonal() * gram * inv_sd.asDiagonal();
  s.diagonal().array() += 1.0;
  auto llt = llt_of(std::move(s));
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixLLT()(i, i));
  return logdet;  // 2 * 0.5 * sum log diag
}

std::vector<int> greedy_variance_sequence(const LmcModel& model,
                                          const std::vector<IndexedPoint>& pool, int n,
                                          const std::vector<int>& initial) {
  model.validate();
  std::vector<char> taken(pool.size(), 0);
  validate_initial(initial, static_cast<int>(pool.size()), &taken);
  if (n < 0 || n > static_cast<int>(pool.size()) - static_cast<int>(initial.size())) {
    throw InputError("greedy sequence length out of range");
  }
  std::vector<int> given = initial;
  std::vector<int> chosen;
  for (int k = 0; k < n; ++k) {
    std::vector<double> vars = partial_vars(model, pool, given);
    int j = argmax_excluding(vars, taken);
    chosen.push_back(j);
    given.push_back(j);
    taken[j] = 1;
  }
  return chosen;
}

std::vector<int> greedy_det_sequence(const LmcModel& model, const Eigen::MatrixXd& pool_x,
                                     int n, const std::vector<int>& initial) {
  model.validate();
  std::vector<char> taken(pool_x.rows(), 0);
  validate_initial(initial, static_cast<int>(pool_x.rows()), &taken);
  if (n < 0 || n > static_cast<int>(pool_x.rows()) - static_cast<int>(initial.size())) {
    throw InputError("greedy sequence length out of range");
  }
  std::vector<int> given = initial;
  std::vector<int> chosen;
  for (int k = 0; k < n; ++k) {
    std::vector<double> dets = partial_dets(model, pool_x, given);
    int j = argmax_excluding(dets, taken);
    chosen.push_back(j);
    given.push_back(j);
    taken[j] = 1;
  }
  return chosen;
}

BoundReport check_lemma1(const LmcModel& model, const std::vector<IndexedPoint>& pool,
                         const std::vector<int>& sequence, const std::vector<int>& initial) {
  model.validate();
  validate_sequence(sequence, static_cast<int>(pool.size()), initial);
  const int n = static_cast<int>(sequence.size());
  BoundReport r;
  std::vector<int> given = initial;
  std::vector<char> taken(pool.size(), 0);
  for (int idx : initial) taken[idx] = 1;
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    std::vector<double> vars = partial_vars(model, pool, given);
    int best = argmax_excluding(vars, taken);
    if (vars[sequence[k]] < vars[best] - kSlackTol) r.precondition_ok = false;
    sum += vars[sequence[k]];
    given.push_back(sequence[k]);
    taken[sequence[k]] = 1;
  }
  std::vector<IndexedPoint> selected;
  for (int idx : sequence) selected.push_back(pool[idx]);
  const BoundConstants b = bound_constants(model);
  r.lhs = sum / n;
  r.rhs = 2.0 * b.c1 / n * mutual_info_direct(model, selected);
  r.slack = r.rhs - r.lhs;
  r.holds = r.slack >= -kSlackTol;
  return r;
}

BoundReport check_lemma1_full(const LmcModel& model, const Eigen::MatrixXd& pool_x,
                              const std::vector<int>& sequence, const std::vector<int>& initial) {
  model.validate();
  validate_sequence(sequence, static_cast<int>(pool_x.rows()), initial);
  const int n = static_cast<int>(sequence.size());
  BoundReport r;
  std::vector<int> given = initial;
  std::vector<char> taken(pool_x.rows(), 0);
  for (int idx : initial) taken[idx] = 1;
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    std::vector<double> dets = partial_dets(model, pool_x, given);
    int best = argmax_excluding(dets, taken);
    if (dets[sequence[k]] < dets[best] - kSlackTol) r.precondition_ok = false;
    sum += dets[sequence[k]];
    given.push_back(sequence[k]);
    taken[sequence[k]] = 1;
  }
  const BoundConstants b = bound_constants(model);
  std::vector<IndexedPoint> selected = all_channel_entries(model, pool_x, sequence);
  r.lhs = sum / n;
  r.rhs = 2.0 * b.c2 / n * mutual_info_direct(model, selected);
  r.slack = r.rhs - r.lhs;
  r.holds = r.slack >= -kSlackTol;
  return r;
}

BoundReport check_fischer(const LmcModel& model, const Eigen::MatrixXd& x) {
  model.validate();
  const int n = static_cast<int>(x.rows());
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;
  BoundReport r;
  r.lhs = mutual_info_direct(model, all_channel_entries(model, x, all));
  double rhs = 0.0;
  for (int p = 0; p < model.channels; ++p) {
    std::vector<IndexedPoint> rows;
    rows.reserve(n);
    for (int i = 0; i < n; ++i) rows.push_back({x.row(i).transpose(), p});
    Eigen::MatrixXd s = assemble_gram(model, rows, rows) / model.noise_vars(p);
    s.diagonal().array() += 1.0;
    auto llt = llt_of(std::move(s));
    for (int i = 0; i < n; ++i) rhs += std::log(llt.matrixLLT()(i, i));
  }
  r.rhs = rhs;
  r.slack = r.rhs - r.lhs;
  r.holds = r.slack >= -kSlackTol;
  return r;
}

BoundReport check_weyl(const std::vector<Eigen::MatrixXd>& matrices) {
  if (matrices.empty()) throw InputError("eigenvalue bound needs at least one matrix");
  const int s = static_cast<int>(matrices[0].rows());
  const int l = static_cast<int>(matrices.size());
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(s, s);
  std::vector<Eigen::VectorXd> eigs;  // each sorted descending
  for (const auto& a : matrices) {
    if (a.rows() != s || a.cols() != s) {
      throw InputError("eigenvalue bound needs matrices of one common size");
    }
    total += a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    eigs.push_back(es.eigenvalues().reverse());
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (total + total.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Eigen::VectorXd beta = es.eigenvalues().reverse();
  BoundReport r;
  r.slack = std::numeric_limits<double>::infinity();
  for (int i = 0; i < s; ++i) {
    const int j = i / l;  // 0-based rank of the per-matrix eigenvalue
    double bound = 0.0;
    for (int m = 0; m < l; ++m) bound += eigs[m](j);
    if (bound - beta(i) < r.slack) {
      r.slack = bound - beta(i);
      r.lhs = beta(i);
      r.rhs = bound;
    }
  }
  r.holds = r.slack >= -kSlackTol;
  return r;
}

DetBoundsReport check_det_bounds(const LmcModel& model, const Eigen::MatrixXd& x,
                                 const Eigen::Ref<const Eigen::VectorXd>& x_star) {
  model.validate();
  const int pch = model.channels;
  const int n = static_cast<int>(x.rows());
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;
  std::vector<IndexedPoint> s = all_channel_entries(model, x, all);
  std::vector<IndexedPoint> star;
  for (int p = 0; p < pch; ++p) star.push_back({x_star, p});
  Eigen::MatrixXd prior = assemble_gram(model, star, star);
  Eigen::MatrixXd post = prior;
  if (!s.empty()) {
    Eigen::MatrixXd kss = assemble_gram(model, s, s);
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
      kss(i, i) += model.noise_vars(s[i].channel);
    }
    auto llt = llt_of(std::move(kss));
    Eigen::MatrixXd v = llt.matrixL().solve(assemble_gram(model, s, star));
    post -= v.transpose() * v;
    post = 0.5 * (post + post.transpose());
  }
  const BoundConstants b = bound_constants(model);
  DetBoundsReport r;
  r.det_posterior = post.determinant();
  r.det_prior = prior.determinant();
  r.det_cap = std::pow(model.latents * b.w_hat * b.w_hat * b.v_hat, pch);
  r.scalar_posterior = post(0, 0);
  r.scalar_prior = prior(0, 0);
  r.scalar_cap = model.latents * b.w_hat * b.w_hat * b.v_hat;
  r.slack = std::min({r.det_prior - r.det_posterior, r.det_cap - r.det_prior,
                      r.scalar_prior - r.scalar_posterior, r.scalar_cap - r.scalar_prior});
  r.holds = r.slack >= -kSlackTol;
  return r;
}

CovarianceFn channel_cov(const LmcModel& model, int p) {
  model.validate();
  if (p < 0 || p >= model.channels) throw InputError("channel index out of range");
  return [model, p](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return lmc_cov(model, p, p, a, b);
  };
}

std::pair<double, std::vector<int>> greedy_max_info_gain(const CovarianceFn& cov,
                                                         double noise_var,
                                                         const Eigen::MatrixXd& pool, int n,
                                                         std::vector<double>* cumulative) {
  const int m = static_cast<int>(pool.rows());
  if (n < 0 || n > m) throw InputError("greedy subset size out of range");
  if (!(noise_var > 0.0)) throw InputError("noise variance must be positive");
  if (cumulative) cumulative->clear();

  std::vector<Eigen::VectorXd> xs(m);
  for (int i = 0; i < m; ++i) xs[i] = pool.row(i).transpose();
  Eigen::VectorXd prior(m);
  for (int i = 0; i < m; ++i) prior(i) = cov(xs[i], xs[i]);
  Eigen::VectorXd explained = Eigen::VectorXd::Zero(m);

  // Growing Cholesky of K_SS + noise I, plus the whitened cross block
  // V = L^-1 K(S, pool); predictive variance is prior - colwise |V|^2.
  Eigen::MatrixXd lfac = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n, m);
  std::vector<Eigen::VectorXd> chosen_rows;  // K(x_j, pool) for each selection

  std::vector<int> chosen;
  std::vector<char> taken(m, 0);
  double value = 0.0;
  for (int k = 0; k < n; ++k) {
    int best = -1;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
      if (taken[i]) continue;
      const double var = std::max(0.0, prior(i) - explained(i));
      const double gain = 0.5 * std::log1p(var / noise_var);
      if (gain > best_gain) {
        best_gain = gain;
        best = i;
      }
    }
    value += best_gain;
    if (cumulative) cumulative->push_back(value);
    Eigen::VectorXd row(m);
    for (int i = 0; i < m; ++i) row(i) = cov(xs[best], xs[i]);
    Eigen::VectorXd a(k);
    for (int s = 0; s < k; ++s) a(s) = chosen_rows[s](best);
    lfac.topLeftCorner(k, k)
        .triangularView<Eigen::Lower>()
        .solveInPlace(a);
    const double d2 = row(best) + noise_var - a.squaredNorm();
    const double d = std::sqrt(std::max(d2, 1e-300));
    lfac.row(k).head(k) = a.transpose();
    lfac(k, k) = d;
    Eigen::RowVectorXd w = (row.transpose() - a.transpose() * v.topRows(k)) / d;
    v.row(k) = w;
    explained.array() += w.transpose().array().square();
    chosen_rows.push_back(std::move(row));
    chosen.push_back(best);
    taken[best] = 1;
  }
  return {value, chosen};
}

std::pair<double, std::vector<int>> greedy_max_info_gain(const KernelSpec& kernel,
                                                         double noise_var,
                                                         const Eigen::MatrixXd& pool, int n,
                                                         std::vector<double>* cumulative) {
  kernel.validate();
  CovarianceFn cov = [kernel](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return eval_kernel(kernel, a, b);
  };
  return greedy_max_info_gain(cov, noise_var, pool, n, cumulative);
}

}  // namespace salmo

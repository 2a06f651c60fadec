#include "salmo/acquisition.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace salmo {

namespace {

constexpr double kLog2PiE = 2.8378770664093454836;  // log(2 pi e)
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double normal_cdf(double t) { return 0.5 * std::erfc(-t / M_SQRT2); }

}  // namespace

void SafetySpec::validate() const {
  if (!(delta > 0.0) || !(delta <= 1.0)) throw SpecError("safety delta must lie in (0, 1]");
  if (std::isnan(z_bar)) throw SpecError("safety threshold is unset");
}

double entropy_score(const Eigen::MatrixXd& cov) {
  const auto r = cov.rows();
  if (r == 0 || cov.cols() != r) throw InputError("entropy_score: covariance must be square");
  const double det = (r == 1) ? cov(0, 0) : cov.determinant();
  if (std::isnan(det) || std::isinf(det)) throw NumericError("entropy_score: non-finite determinant");
  if (det <= 0.0) return -std::numeric_limits<double>::infinity();
  return 0.5 * std::log(det) + 0.5 * double(r) * kLog2PiE;
}

double safety_probability(const PosteriorGaussian& post, const SafetySpec& spec) {
  spec.validate();
  if (post.mean.size() != 1 || post.cov.rows() != 1)
    throw InputError("safety_probability: posterior must be scalar");
  const double mean = post.mean[0];
  double var = post.cov(0, 0);
  if (var < 0.0) var = 0.0;
  double upper;  // probability of staying below the threshold
  if (var == 0.0) {
    upper = (mean <= spec.z_bar) ? 1.0 : 0.0;
  } else {
    upper = normal_cdf((spec.z_bar - mean) / std::sqrt(var));
  }
  return spec.z_mode == ZMode::UpperBound ? upper : 1.0 - upper;
}

std::optional<QueryChoice> safe_query(const std::vector<PosteriorGaussian>& main_posteriors,
                                      const std::vector<PosteriorGaussian>& safety_posteriors,
                                      const SafetySpec& spec, Rng& rng, bool enforce_constraint) {
  if (main_posteriors.size() != safety_posteriors.size())
    throw InputError("safe_query: posterior arrays differ in length");
  double best = -std::numeric_limits<double>::infinity();
  bool found = false;
  std::vector<int> ties;
  std::vector<double> probs(main_posteriors.size());
  for (size_t i = 0; i < main_posteriors.size(); ++i) {
    probs[i] = safety_probability(safety_posteriors[i], spec);
    if (enforce_constraint && !(probs[i] > 1.0 - spec.delta)) continue;
    const double s = entropy_score(main_posteriors[i].cov);
    if (!found || s > best) {
      found = true;
      best = s;
      ties.assign(1, int(i));
    } else if (s == best) {
      ties.push_back(int(i));
    }
  }
  if (!found) return std::nullopt;
  const int pick = ties.size() == 1 ? ties[0] : ties[size_t(rng.uniform_int(ties.size()))];
  return QueryChoice{pick, best, probs[pick]};
}

std::optional<QueryChoice> random_safe_query(const std::vector<PosteriorGaussian>& safety_posteriors,
                                             const SafetySpec& spec, Rng& rng,
                                             bool enforce_constraint) {
  std::vector<int> safe;
  std::vector<double> probs(safety_posteriors.size());
  for (size_t i = 0; i < safety_posteriors.size(); ++i) {
    probs[i] = safety_probability(safety_posteriors[i], spec);
    if (!enforce_constraint || probs[i] > 1.0 - spec.delta) safe.push_back(int(i));
  }
  if (safe.empty()) return std::nullopt;
  const int pick = safe[size_t(rng.uniform_int(safe.size()))];
  return QueryChoice{pick, kNan, probs[pick]};
}

MetricsRecord evaluate_metrics(const Eigen::MatrixXd& pred_mean, const Eigen::MatrixXd& pred_var,
                               const Eigen::MatrixXd& targets,
                               const std::vector<char>& flagged_safe,
                               const std::vector<char>& truly_safe) {
  const auto n = targets.rows(), p = targets.cols();
  if (n == 0) throw InputError("evaluate_metrics: empty test set");
  if (pred_mean.rows() != n || pred_mean.cols() != p || pred_var.rows() != n ||
      pred_var.cols() != p)
    throw InputError("evaluate_metrics: prediction shape does not match targets");
  if (flagged_safe.size() != truly_safe.size())
    throw InputError("evaluate_metrics: safety flag arrays differ in length");

  MetricsRecord rec;
  rec.rmse_per_channel.resize(p);
  for (Eigen::Index c = 0; c < p; ++c)
    rec.rmse_per_channel[c] = std::sqrt((pred_mean.col(c) - targets.col(c)).squaredNorm() / double(n));
  rec.rmse_mean = rec.rmse_per_channel.mean();

  double ld = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < p; ++c) {
      const double v = std::max(pred_var(i, c), 1e-300);
      const double e = targets(i, c) - pred_mean(i, c);
      ld += -0.5 * std::log(2.0 * M_PI * v) - 0.5 * e * e / v;
    }
  rec.test_log_density = ld / double(n * p);

  long flagged = 0, correct = 0;
  for (size_t i = 0; i < flagged_safe.size(); ++i)
    if (flagged_safe[i]) {
      ++flagged;
      if (truly_safe[i]) ++correct;
    }
  rec.safety_precision = flagged == 0 ? 1.0 : double(correct) / double(flagged);
  return rec;
}

void RunSettings::validate() const {
  if (!(safety.delta > 0.0) || !(safety.delta <= 1.0))
    throw SpecError("safety delta must lie in (0, 1]");
  if (iter_num < 0) throw SpecError("iter_num must be >= 0");
  if (initial_nsum < 1) throw SpecError("initial_nsum must be >= 1");
  if (restarts < 1) throw SpecError("restarts must be >= 1");
  if (latents < 0) throw SpecError("latents must be >= 0");
  if (inference == InferenceMethod::Hmc) hmc.validate();
  priors.validate();
  if (inference == InferenceMethod::Fixed && (!fixed_model || !fixed_safety_kernel))
    throw SpecError("fixed inference needs fixed_model and fixed_safety_kernel");
}

double Trajectory::safe_query_fraction() const {
  long queries = 0, safe = 0;
  for (const auto& r : records)
    if (r.iteration > 0) {
      ++queries;
      if (r.truly_safe) ++safe;
    }
  return queries == 0 ? kNan : double(safe) / double(queries);
}

namespace {

// Moment-matched scalar posterior accumulated across hyperparameter samples.
struct ScalarMix {
  double sum_mean = 0.0, sum_second = 0.0;
  int n = 0;
  void add(double mean, double var) {
    sum_mean += mean;
    sum_second += var + mean * mean;
    ++n;
  }
  double mean() const { return sum_mean / n; }
  double var() const {
    const double m = mean();
    return std::max(sum_second / n - m * m, 0.0);
  }
  PosteriorGaussian posterior() const {
    PosteriorGaussian p;
    p.mean = Eigen::VectorXd::Constant(1, mean());
    p.cov = Eigen::MatrixXd::Constant(1, 1, var());
    return p;
  }
};

struct FitState {
  std::vector<LmcModel> main_models;
  std::vector<MogpSolver> main_solvers;
  std::vector<LmcModel> safety_models;
  std::vector<MogpSolver> safety_solvers;

  PosteriorGaussian main_scalar(const Eigen::Ref<const Eigen::VectorXd>& x, int p,
                                bool add_noise) const {
    ScalarMix mix;
    for (size_t s = 0; s < main_solvers.size(); ++s) {
      PosteriorGaussian post = main_solvers[s].predict_partial(x, p);
      double v = post.cov(0, 0);
      if (add_noise) v += main_models[s].noise_vars[p];
      mix.add(post.mean[0], v);
    }
    return mix.posterior();
  }

  PosteriorGaussian main_full(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    std::vector<PosteriorGaussian> comps;
    comps.reserve(main_solvers.size());
    for (const auto& s : main_solvers) comps.push_back(s.predict_full(x));
    return mixture_moment_match(comps);
  }

  PosteriorGaussian safety_scalar(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    ScalarMix mix;
    for (const auto& s : safety_solvers) {
      PosteriorGaussian post = s.predict_partial(x, 0);
      mix.add(post.mean[0], post.cov(0, 0));
    }
    return mix.posterior();
  }
};

LmcModel make_proto(int channels, int latents, KernelFamily family, bool identity_w) {
  LmcModel m;
  m.channels = channels;
  m.latents = latents;
  for (int l = 0; l < latents; ++l) {
    KernelSpec k;
    k.family = family;
    k.variance = 1.0;
    k.lengthscale = 1.0;
    m.kernels.push_back(k);
  }
  if (identity_w) {
    m.w = Eigen::MatrixXd::Identity(channels, latents);
  } else {
    m.w = Eigen::MatrixXd::Ones(channels, latents);
  }
  m.noise_vars = Eigen::VectorXd::Constant(channels, 0.1);
  return m;
}

class AlLoop {
 public:
  AlLoop(const RunSettings& settings, const Dataset& dataset, std::uint64_t seed)
      : st_(settings), ds_(dataset), rng_(seed) {
    st_.validate();
    if (std::isnan(st_.safety.z_bar)) {
      st_.safety.z_bar = ds_.safety_threshold;
      st_.safety.z_mode = ds_.safety_lower_bound ? ZMode::LowerBound : ZMode::UpperBound;
    }
    p_ = ds_.channels;
    l_ = st_.latents > 0 ? st_.latents : p_;
    const bool identity_w = st_.pipeline == Pipeline::AlIndGps;
    if (identity_w && l_ != p_) throw SpecError("independent-GP pipeline requires latents == channels");
    main_space_.proto = make_proto(p_, l_, st_.kernel_family, identity_w);
    main_space_.include_w = !identity_w;
    safety_space_.proto = make_proto(1, 1, st_.kernel_family, true);
    safety_space_.include_w = false;

    obs_.inputs.resize(0, ds_.dim);
    obs_.channels = p_;
    sobs_.inputs.resize(0, ds_.dim);
    sobs_.channels = 1;
    row_input_.assign(ds_.n_pool(), -1);
    pair_queried_.assign(size_t(ds_.n_pool()) * p_, 0);
    row_fully_queried_.assign(ds_.n_pool(), 0);
    for (int i = 0; i < ds_.n_test(); ++i)
      if (ds_.test_safe[i]) test_rows_.push_back(i);
  }

  Trajectory run() {
    init_design();
    Trajectory traj;
    fit();
    traj.records.push_back(baseline_record());
    for (int it = 1; it <= st_.iter_num; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      candidates_.clear();
      collect_candidates();
      if (candidates_.empty()) {
        traj.status = "pool_exhausted";
        traj.truncated = true;
        break;
      }
      auto choice = select();
      const auto t1 = std::chrono::steady_clock::now();
      if (!choice) {
        traj.status = "empty_safe_set";
        traj.truncated = true;
        break;
      }
      const auto [row, ch] = candidates_[size_t(choice->candidate)];
      apply_query(row, ch);
      fit();
      TrajectoryRecord rec;
      rec.iteration = it;
      rec.n_sum = obs_.n_sum();
      rec.queried_x = ds_.pool_x.row(row);
      rec.queried_channel = ch;
      rec.acq_score = choice->acq_score;
      rec.safety_prob = choice->safety_prob;
      rec.truly_safe = ds_.pool_safe[row];
      rec.metrics = metrics();
      rec.inference_seconds = fit_seconds_;
      rec.scoring_seconds = std::chrono::duration<double>(t1 - t0).count();
      traj.records.push_back(std::move(rec));
    }
    return traj;
  }

 private:
  void init_design() {
    if (st_.initial_nsum % p_ != 0)
      throw SpecError("initial_nsum must be divisible by the channel count");
    const int rows_needed =
        st_.mode == ObservationMode::Poo ? st_.initial_nsum : st_.initial_nsum / p_;
    std::vector<int> safe_rows;
    for (int i = 0; i < ds_.n_pool(); ++i)
      if (ds_.pool_safe[i]) safe_rows.push_back(i);
    if (int(safe_rows.size()) < rows_needed)
      throw InputError("pool has too few truly safe rows for the initial design");
    for (int i = int(safe_rows.size()) - 1; i > 0; --i)
      std::swap(safe_rows[size_t(i)], safe_rows[size_t(rng_.uniform_int(std::uint64_t(i) + 1))]);

    if (st_.mode == ObservationMode::Poo) {
      const int per_channel = st_.initial_nsum / p_;
      for (int i = 0; i < rows_needed; ++i) {
        const int row = safe_rows[size_t(i)];
        const int ch = i / per_channel;
        observe(row, ch);
        // Initial rows leave the pool entirely (observed and pool sets are
        // disjoint), even in channels never observed.
        row_fully_queried_[size_t(row)] = 1;
        for (int c = 0; c < p_; ++c) pair_queried_[size_t(row) * p_ + c] = 1;
      }
    } else {
      for (int i = 0; i < rows_needed; ++i) {
        const int row = safe_rows[size_t(i)];
        for (int c = 0; c < p_; ++c) observe(row, c);
        row_fully_queried_[size_t(row)] = 1;
      }
    }
  }

  // Adds (row, channel) to the observed set, attaching the input row and the
  // safety value on first contact with the row.
  void observe(int row, int channel) {
    int& idx = row_input_[size_t(row)];
    if (idx < 0) {
      idx = obs_.n_inputs();
      obs_.inputs.conservativeResize(idx + 1, Eigen::NoChange);
      obs_.inputs.row(idx) = ds_.pool_x.row(row);
      const int sidx = sobs_.n_inputs();
      sobs_.inputs.conservativeResize(sidx + 1, Eigen::NoChange);
      sobs_.inputs.row(sidx) = ds_.pool_x.row(row);
      sobs_.entries.push_back({sidx, 0, ds_.pool_z[row]});
      sobs_.safety_values.push_back({sidx, ds_.pool_z[row]});
    }
    obs_.entries.push_back({idx, channel, ds_.pool_y(row, channel)});
  }

  void apply_query(int row, int channel) {
    if (st_.mode == ObservationMode::Poo) {
      observe(row, channel);
      pair_queried_[size_t(row) * p_ + channel] = 1;
      bool all = true;
      for (int c = 0; c < p_; ++c)
        if (!pair_queried_[size_t(row) * p_ + c]) all = false;
      if (all) row_fully_queried_[size_t(row)] = 1;
    } else {
      for (int c = 0; c < p_; ++c) observe(row, c);
      row_fully_queried_[size_t(row)] = 1;
    }
  }

  void collect_candidates() {
    if (st_.mode == ObservationMode::Poo) {
      for (int row = 0; row < ds_.n_pool(); ++row)
        for (int c = 0; c < p_; ++c)
          if (!pair_queried_[size_t(row) * p_ + c]) candidates_.push_back({row, c});
    } else {
      for (int row = 0; row < ds_.n_pool(); ++row)
        if (!row_fully_queried_[size_t(row)]) candidates_.push_back({row, -1});
    }
  }

  Eigen::VectorXd theta_init(const ParamSpace& space, Eigen::VectorXd* warm) {
    if (warm->size() == space.dim()) return *warm;
    return st_.priors.draw(space, rng_);
  }

  std::vector<Eigen::VectorXd> run_hmc(const ParamSpace& space, const ObservationSet& obs,
                                       Eigen::VectorXd* warm) {
    HmcSettings hmc = st_.hmc;
    for (int attempt = 0; attempt < 10; ++attempt) {
      hmc.seed = rng_.next_u64();
      Eigen::VectorXd init = attempt == 0 ? theta_init(space, warm) : st_.priors.draw(space, rng_);
      try {
        auto samples = hmc_sample(space, obs, st_.priors, hmc, init);
        *warm = samples.back();
        return samples;
      } catch (const InferenceError&) {
        if (attempt == 9) throw;
      }
    }
    throw InferenceError("hmc: unreachable");
  }

  void fit() {
    const auto t0 = std::chrono::steady_clock::now();
    fit_ = FitState{};
    switch (st_.inference) {
      case InferenceMethod::Fixed: {
        fit_.main_models = {*st_.fixed_model};
        LmcModel sm = make_proto(1, 1, st_.fixed_safety_kernel->family, true);
        sm.kernels[0] = *st_.fixed_safety_kernel;
        sm.noise_vars[0] = st_.fixed_safety_noise;
        fit_.safety_models = {sm};
        break;
      }
      case InferenceMethod::TypeII: {
        Eigen::VectorXd init = theta_init(main_space_, &warm_main_);
        warm_main_ = optimize_hyperparameters(main_space_, obs_, st_.priors, init, st_.restarts,
                                              rng_.next_u64());
        fit_.main_models = {main_space_.unpack(warm_main_)};
        Eigen::VectorXd sinit = theta_init(safety_space_, &warm_safety_);
        warm_safety_ = optimize_hyperparameters(safety_space_, sobs_, st_.priors, sinit,
                                                st_.restarts, rng_.next_u64());
        fit_.safety_models = {safety_space_.unpack(warm_safety_)};
        break;
      }
      case InferenceMethod::Hmc: {
        for (const auto& theta : run_hmc(main_space_, obs_, &warm_main_))
          fit_.main_models.push_back(main_space_.unpack(theta));
        for (const auto& theta : run_hmc(safety_space_, sobs_, &warm_safety_))
          fit_.safety_models.push_back(safety_space_.unpack(theta));
        break;
      }
    }
    for (const auto& m : fit_.main_models) fit_.main_solvers.emplace_back(m, obs_);
    for (const auto& m : fit_.safety_models) fit_.safety_solvers.emplace_back(m, sobs_);
    fit_seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  std::optional<QueryChoice> select() {
    // Safety posterior per pool row present among candidates.
    std::unordered_map<int, PosteriorGaussian> row_safety;
    for (const auto& [row, ch] : candidates_)
      if (!row_safety.count(row)) row_safety.emplace(row, fit_.safety_scalar(ds_.pool_x.row(row)));

    std::vector<PosteriorGaussian> safety_posts;
    safety_posts.reserve(candidates_.size());
    for (const auto& [row, ch] : candidates_) safety_posts.push_back(row_safety.at(row));

    const bool enforce = st_.pipeline != Pipeline::AlMogpNoSafe;
    if (st_.pipeline == Pipeline::RsMogp) {
      auto choice = random_safe_query(safety_posts, st_.safety, rng_, enforce);
      if (choice) {
        const auto& [row, ch] = candidates_[size_t(choice->candidate)];
        choice->acq_score = entropy_score(candidate_posterior(row, ch).cov);
      }
      return choice;
    }
    std::vector<PosteriorGaussian> main_posts;
    main_posts.reserve(candidates_.size());
    for (const auto& [row, ch] : candidates_) main_posts.push_back(candidate_posterior(row, ch));
    return safe_query(main_posts, safety_posts, st_.safety, rng_, enforce);
  }

  PosteriorGaussian candidate_posterior(int row, int channel) const {
    if (st_.mode == ObservationMode::Poo)
      return fit_.main_scalar(ds_.pool_x.row(row), channel, false);
    return fit_.main_full(ds_.pool_x.row(row));
  }

  MetricsRecord metrics() const {
    std::vector<char> flagged(ds_.n_pool());
    for (int row = 0; row < ds_.n_pool(); ++row)
      flagged[size_t(row)] =
          safety_probability(fit_.safety_scalar(ds_.pool_x.row(row)), st_.safety) >
          1.0 - st_.safety.delta;

    if (test_rows_.empty()) {
      MetricsRecord rec;
      rec.rmse_per_channel = Eigen::VectorXd::Constant(p_, kNan);
      rec.rmse_mean = kNan;
      rec.test_log_density = kNan;
      long f = 0, c = 0;
      for (int row = 0; row < ds_.n_pool(); ++row)
        if (flagged[size_t(row)]) {
          ++f;
          if (ds_.pool_safe[size_t(row)]) ++c;
        }
      rec.safety_precision = f == 0 ? 1.0 : double(c) / double(f);
      return rec;
    }

    const int nt = int(test_rows_.size());
    Eigen::MatrixXd mean(nt, p_), var(nt, p_), targets(nt, p_);
    for (int i = 0; i < nt; ++i) {
      const int row = test_rows_[size_t(i)];
      for (int c = 0; c < p_; ++c) {
        PosteriorGaussian post =
            fit_.main_scalar(ds_.test_x.row(row), c, ds_.noisy_test_targets);
        mean(i, c) = post.mean[0];
        var(i, c) = post.cov(0, 0);
        targets(i, c) = ds_.test_y(row, c);
      }
    }
    std::vector<char> truth(ds_.pool_safe.begin(), ds_.pool_safe.end());
    return evaluate_metrics(mean, var, targets, flagged, truth);
  }

  TrajectoryRecord baseline_record() const {
    TrajectoryRecord rec;
    rec.iteration = 0;
    rec.n_sum = obs_.n_sum();
    rec.queried_channel = -1;
    rec.acq_score = kNan;
    rec.safety_prob = kNan;
    rec.truly_safe = false;
    rec.metrics = metrics();
    rec.inference_seconds = fit_seconds_;
    rec.scoring_seconds = 0.0;
    return rec;
  }

  RunSettings st_;
  const Dataset& ds_;
  Rng rng_;
  int p_ = 0, l_ = 0;
  ParamSpace main_space_, safety_space_;
  ObservationSet obs_, sobs_;
  std::vector<int> row_input_;
  std::vector<char> pair_queried_, row_fully_queried_;
  std::vector<std::pair<int, int>> candidates_;
  std::vector<int> test_rows_;
  FitState fit_;
  Eigen::VectorXd warm_main_, warm_safety_;
  double fit_seconds_ = 0.0;
};

}  // namespace

Trajectory run_safe_al(const RunSettings& settings, const Dataset& dataset, std::uint64_t seed) {
  return AlLoop(settings, dataset, seed).run();
}

}  // namespace salmo

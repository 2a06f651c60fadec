#include "salmo/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "salmo/rng.hpp"

namespace salmo {

ObservationSet Dataset::full_pool_observations() const {
  ObservationSet obs;
  obs.inputs = pool_x;
  obs.channels = channels;
  obs.entries.reserve(size_t(n_pool()) * channels);
  for (int i = 0; i < n_pool(); ++i)
    for (int p = 0; p < channels; ++p)
      obs.entries.push_back({i, p, pool_y(i, p)});
  obs.safety_values.reserve(n_pool());
  for (int i = 0; i < n_pool(); ++i) obs.safety_values.push_back({i, pool_z[i]});
  obs.validate();
  return obs;
}

double sin_sigmoid_f(double x, int channel) {
  const double s = std::sin(10.0 * x);
  const double sig = 1.0 / (1.0 + std::exp(-2.0 * x));
  if (channel == 0) return s + sig;
  if (channel == 1) return s - sig;
  throw InputError("sin_sigmoid_f: channel must be 0 or 1");
}

double sin_sigmoid_h(double x) { return std::exp(-(x - 0.1) * (x - 0.1) / 2.0); }

std::pair<double, double> sin_sigmoid_safe_interval() {
  const double r = std::sqrt(-2.0 * std::log(0.7));
  return {0.1 - r, 0.1 + r};
}

Dataset gen_sin_sigmoid(int n_pool, int n_test, std::uint64_t seed) {
  if (n_pool < 1 || n_test < 1) throw InputError("gen_sin_sigmoid: counts must be >= 1");
  Rng rng(seed);
  Dataset d;
  d.channels = 2;
  d.dim = 1;
  d.safety_threshold = 0.7;
  d.safety_lower_bound = true;
  d.noisy_test_targets = false;

  d.pool_x.resize(n_pool, 1);
  for (int i = 0; i < n_pool; ++i) d.pool_x(i, 0) = rng.uniform(-2.0, 2.0);
  d.pool_y.resize(n_pool, 2);
  for (int i = 0; i < n_pool; ++i)
    for (int p = 0; p < 2; ++p)
      d.pool_y(i, p) = sin_sigmoid_f(d.pool_x(i, 0), p) + 0.4 * rng.normal();
  d.pool_z.resize(n_pool);
  d.pool_z_true.resize(n_pool);
  d.pool_safe.resize(n_pool);
  for (int i = 0; i < n_pool; ++i) {
    d.pool_z_true[i] = sin_sigmoid_h(d.pool_x(i, 0));
    d.pool_z[i] = d.pool_z_true[i] + 0.05 * rng.normal();
    d.pool_safe[i] = d.pool_z_true[i] > 0.7;
  }

  const auto [lo, hi] = sin_sigmoid_safe_interval();
  d.test_x.resize(n_test, 1);
  for (int i = 0; i < n_test; ++i) d.test_x(i, 0) = rng.uniform(lo, hi);
  d.test_y.resize(n_test, 2);
  for (int i = 0; i < n_test; ++i)
    for (int p = 0; p < 2; ++p) d.test_y(i, p) = sin_sigmoid_f(d.test_x(i, 0), p);
  d.test_safe.assign(n_test, 1);
  return d;
}

namespace {

// Cholesky factor for prior sampling; escalating jitter against round-off.
Eigen::MatrixXd sampling_chol(const Eigen::MatrixXd& k) {
  for (double mult = 1e-12; mult <= 1e-4 * 1.0000001; mult *= 10.0) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += mult * k.diagonal().mean();
    Eigen::LLT<Eigen::MatrixXd> llt(kj);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw NumericError("prior sampling: covariance not factorizable");
}

}  // namespace

std::vector<Dataset> gen_mogp_samples(const MogpSamplesParams& params, std::uint64_t seed) {
  return gen_mogp_samples(params, seed, nullptr);
}

std::vector<Dataset> gen_mogp_samples(const MogpSamplesParams& params, std::uint64_t seed,
                                      MogpSamplesTrace* trace) {
  const int d = params.dims, p = params.channels, l = params.latents;
  const int n_total = params.n_train + params.n_test;
  if (d < 1 || p < 1 || l < 1 || params.n_train < 1 || params.n_test < 1 || params.repeats < 1)
    throw InputError("gen_mogp_samples: all counts must be >= 1");
  Rng rng(seed);

  // Step 1: unique inputs, then shuffle.
  std::vector<Eigen::VectorXd> xs;
  std::set<std::vector<double>> seen;
  while (int(xs.size()) < n_total) {
    Eigen::VectorXd x(d);
    for (int j = 0; j < d; ++j) x[j] = rng.uniform(-2.0, 2.0);
    std::vector<double> key(x.data(), x.data() + d);
    if (seen.insert(std::move(key)).second) xs.push_back(std::move(x));
  }
  for (int i = n_total - 1; i > 0; --i)
    std::swap(xs[i], xs[size_t(rng.uniform_int(std::uint64_t(i) + 1))]);
  Eigen::MatrixXd x_all(n_total, d);
  for (int i = 0; i < n_total; ++i) x_all.row(i) = xs[i];

  // Step 2: L latent kernels plus one safety kernel.
  std::vector<KernelSpec> kernels;
  for (int i = 0; i <= l; ++i) {
    double variance = rng.uniform(0.01, 1.0);
    double lengthscale = rng.uniform(0.01, 1.0);
    kernels.push_back(KernelSpec::sq_exp_iso(variance, lengthscale));
  }
  for (int i = 0; i < l; ++i) kernels[i].variance = 1.0;
  kernels[l].lengthscale = 1.0;

  std::vector<Eigen::MatrixXd> chols;
  for (int i = 0; i <= l; ++i) {
    Eigen::MatrixXd k(n_total, n_total);
    for (int a = 0; a < n_total; ++a)
      for (int b = 0; b <= a; ++b) {
        k(a, b) = eval_kernel(kernels[i], x_all.row(a), x_all.row(b));
        k(b, a) = k(a, b);
      }
    chols.push_back(sampling_chol(k));
  }

  // Step 3: latent trajectories per repeat, then noise-free safety values.
  const int e_total = params.repeats;
  std::vector<Eigen::MatrixXd> g(e_total);
  for (int e = 0; e < e_total; ++e) {
    g[e].resize(n_total, l);
    for (int i = 0; i < l; ++i) {
      Eigen::VectorXd u(n_total);
      for (int a = 0; a < n_total; ++a) u[a] = rng.normal();
      g[e].col(i) = chols[i] * u;
    }
  }
  std::vector<Eigen::VectorXd> z_true(e_total);
  for (int e = 0; e < e_total; ++e) {
    Eigen::VectorXd u(n_total);
    for (int a = 0; a < n_total; ++a) u[a] = rng.normal();
    z_true[e] = chols[l] * u;
  }

  // Step 4: unit-norm mixing rows.
  Eigen::MatrixXd w(p, l);
  for (int a = 0; a < p; ++a) {
    Eigen::VectorXd row(l);
    do {
      for (int b = 0; b < l; ++b) row[b] = rng.normal();
    } while (row.norm() == 0.0);
    w.row(a) = row / row.norm();
  }

  // Steps 5 and 6: mix and add noise.
  std::vector<Eigen::MatrixXd> y(e_total);
  std::vector<Eigen::VectorXd> z(e_total);
  for (int e = 0; e < e_total; ++e) {
    y[e] = g[e] * w.transpose();
    for (int a = 0; a < n_total; ++a)
      for (int b = 0; b < p; ++b) y[e](a, b) += params.noise_y * rng.normal();
    z[e] = z_true[e];
    for (int a = 0; a < n_total; ++a) z[e][a] += params.noise_z * rng.normal();
  }

  std::vector<double> pooled;
  pooled.reserve(size_t(e_total) * n_total);
  for (int e = 0; e < e_total; ++e)
    for (int a = 0; a < n_total; ++a) pooled.push_back(z[e][a]);
  const double threshold = quantile(pooled, params.safe_quantile);

  if (trace) {
    trace->x = x_all;
    trace->kernels = kernels;
    trace->w = w;
    trace->pooled_noisy_z = std::move(pooled);
    trace->threshold = threshold;
  }

  std::vector<Dataset> out(e_total);
  for (int e = 0; e < e_total; ++e) {
    Dataset& ds = out[e];
    ds.channels = p;
    ds.dim = d;
    ds.safety_threshold = threshold;
    ds.safety_lower_bound = true;
    ds.noisy_test_targets = true;
    ds.pool_x = x_all.topRows(params.n_train);
    ds.pool_y = y[e].topRows(params.n_train);
    ds.pool_z = z[e].head(params.n_train);
    ds.pool_z_true = z_true[e].head(params.n_train);
    ds.pool_safe.resize(params.n_train);
    for (int a = 0; a < params.n_train; ++a) ds.pool_safe[a] = ds.pool_z_true[a] > threshold;
    ds.test_x = x_all.bottomRows(params.n_test);
    ds.test_y = y[e].bottomRows(params.n_test);
    ds.test_safe.resize(params.n_test);
    for (int a = 0; a < params.n_test; ++a)
      ds.test_safe[a] = z_true[e][params.n_train + a] > threshold;
  }
  return out;
}

namespace {

double parse_cell(const std::string& token, int file_row, const std::string& column) {
  const char* begin = token.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  while (end && *end == ' ') ++end;
  if (end == begin || (end && *end != '\0') || token.empty()) {
    std::ostringstream msg;
    msg << "non-numeric value '" << token << "' at row " << file_row << ", column '" << column
        << "'";
    throw ParseError(msg.str());
  }
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trimmed(const std::string& s) {
  auto b = s.find_first_not_of(" \t");
  auto e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_csv_dataset(const std::string& path, const CsvSchema& schema) {
  if (schema.input_columns.empty() || schema.output_columns.empty())
    throw ConfigError("csv schema needs at least one input and one output column");
  if (schema.safety_column.empty()) throw ConfigError("csv schema needs a safety column");
  if (schema.test_fraction < 0.0 || schema.test_fraction >= 1.0)
    throw ConfigError("csv schema test_fraction must lie in [0, 1)");
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open csv file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty csv file: " + path);
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trimmed(h);

  auto column_index = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    throw ParseError("missing column '" + name + "' in csv header");
  };
  std::vector<int> in_idx, out_idx;
  for (const auto& c : schema.input_columns) in_idx.push_back(column_index(c));
  for (const auto& c : schema.output_columns) out_idx.push_back(column_index(c));
  const int safety_idx = column_index(schema.safety_column);

  std::vector<std::vector<double>> rows;
  int file_row = 1;
  while (std::getline(in, line)) {
    ++file_row;
    if (trimmed(line).empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      std::ostringstream msg;
      msg << "row " << file_row << " has " << cells.size() << " fields, header has "
          << header.size();
      throw ParseError(msg.str());
    }
    std::vector<double> row;
    row.reserve(in_idx.size() + out_idx.size() + 1);
    for (size_t i = 0; i < in_idx.size(); ++i)
      row.push_back(parse_cell(trimmed(cells[in_idx[i]]), file_row, header[in_idx[i]]));
    for (size_t i = 0; i < out_idx.size(); ++i)
      row.push_back(parse_cell(trimmed(cells[out_idx[i]]), file_row, header[out_idx[i]]));
    row.push_back(parse_cell(trimmed(cells[safety_idx]), file_row, header[safety_idx]));
    rows.push_back(std::move(row));
  }
  const int n = int(rows.size());
  if (n == 0) throw ParseError("csv file has a header but no data rows: " + path);

  const int d = int(in_idx.size()), p = int(out_idx.size());
  const int n_test = int(std::floor(schema.test_fraction * n));
  const int n_train = n - n_test;
  if (n_train < 1) throw ConfigError("csv schema test_fraction leaves no training rows");

  Eigen::MatrixXd x(n, d), y(n, p);
  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = rows[i][j];
    for (int j = 0; j < p; ++j) y(i, j) = rows[i][d + j];
    z[i] = rows[i][d + p];
  }

  if (schema.standardize) {
    auto standardize_col = [&](Eigen::Ref<Eigen::VectorXd> col, const std::string& name) {
      const double mean = col.head(n_train).mean();
      const double var = (col.head(n_train).array() - mean).square().sum() / double(n_train);
      if (!(var > 0.0))
        throw ParseError("column '" + name + "' has zero variance on the training split");
      col = (col.array() - mean) / std::sqrt(var);
    };
    for (int j = 0; j < d; ++j) standardize_col(x.col(j), header[in_idx[j]]);
    for (int j = 0; j < p; ++j) standardize_col(y.col(j), header[out_idx[j]]);
  }

  double threshold = schema.safety_threshold;
  if (std::isnan(threshold)) {
    std::vector<double> train_z(z.data(), z.data() + n_train);
    threshold = quantile(std::move(train_z), 0.2);
  }

  Dataset ds;
  ds.channels = p;
  ds.dim = d;
  ds.safety_threshold = threshold;
  ds.safety_lower_bound = schema.safety_lower_bound;
  ds.noisy_test_targets = true;
  ds.pool_x = x.topRows(n_train);
  ds.pool_y = y.topRows(n_train);
  ds.pool_z = z.head(n_train);
  ds.pool_z_true = ds.pool_z;
  ds.pool_safe.resize(n_train);
  for (int i = 0; i < n_train; ++i)
    ds.pool_safe[i] = schema.safety_lower_bound ? (ds.pool_z[i] > threshold)
                                                : (ds.pool_z[i] < threshold);
  ds.test_x = x.bottomRows(n_test);
  ds.test_y = y.bottomRows(n_test);
  ds.test_safe.resize(n_test);
  for (int i = 0; i < n_test; ++i) {
    const double zi = z[n_train + i];
    ds.test_safe[i] = schema.safety_lower_bound ? (zi > threshold) : (zi < threshold);
  }
  return ds;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("quantile: empty input");
  if (q < 0.0 || q > 1.0) throw InputError("quantile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = q * double(values.size() - 1);
  const auto lo = size_t(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - double(lo)) * (values[lo + 1] - values[lo]);
}

}  // namespace salmo

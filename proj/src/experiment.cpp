#include "salmo/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace salmo {
namespace {

using nlohmann::json;

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw ConfigError("config field '" + field + "': " + why);
}

void check_keys(const json& j, const std::string& scope,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (item.key() == a) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      bad_field(scope.empty() ? item.key() : scope + "." + item.key(), "unknown key");
    }
  }
}

double get_number(const json& j, const std::string& field) {
  if (!j.is_number()) bad_field(field, "must be a number");
  return j.get<double>();
}

int get_int(const json& j, const std::string& field, int lo, int hi) {
  if (!j.is_number_integer()) bad_field(field, "must be an integer");
  const auto v = j.get<std::int64_t>();
  if (v < lo || v > hi) {
    bad_field(field, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return static_cast<int>(v);
}

std::uint64_t get_u64(const json& j, const std::string& field) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) {
    return static_cast<std::uint64_t>(j.get<std::int64_t>());
  }
  bad_field(field, "must be a non-negative integer");
}

std::string get_string(const json& j, const std::string& field) {
  if (!j.is_string()) bad_field(field, "must be a string");
  return j.get<std::string>();
}

bool get_bool(const json& j, const std::string& field) {
  if (!j.is_boolean()) bad_field(field, "must be a boolean");
  return j.get<bool>();
}

GammaParams get_gamma(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    bad_field(field, "must be [shape, rate]");
  }
  GammaParams g{j[0].get<double>(), j[1].get<double>()};
  if (!(g.alpha > 0.0) || !(g.beta > 0.0)) bad_field(field, "shape and rate must be positive");
  return g;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_semicolon(const Eigen::VectorXd& v) {
  std::string out;
  for (int i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += fmt(v(i));
  }
  return out;
}

struct RepeatResult {
  int repeat = 0;
  std::uint64_t dataset_seed = 0;
  std::uint64_t run_seed = 0;
  bool failed = false;
  std::string status = "completed";
  std::string error;
  std::string file;
  Trajectory traj;
};

void write_trajectory_csv(const std::string& path, const std::string& pipeline, int repeat,
                          const Trajectory& traj) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "pipeline,repeat,iteration,n_sum,queried_x,queried_channel,acq_score,safety_prob,"
       "truly_safe,rmse_mean,rmse_per_channel,test_log_density,safety_precision\n";
  for (const auto& rec : traj.records) {
    f << pipeline << ',' << repeat << ',' << rec.iteration << ',' << rec.n_sum << ','
      << join_semicolon(rec.queried_x) << ',' << rec.queried_channel << ','
      << fmt(rec.acq_score) << ',' << fmt(rec.safety_prob) << ',' << int(rec.truly_safe) << ','
      << fmt(rec.metrics.rmse_mean) << ',' << join_semicolon(rec.metrics.rmse_per_channel)
      << ',' << fmt(rec.metrics.test_log_density) << ',' << fmt(rec.metrics.safety_precision)
      << '\n';
  }
  if (!f.good()) throw std::runtime_error("write to " + path + " failed");
}

double stderr_of(const std::vector<double>& xs, double mean) {
  const auto n = xs.size();
  if (n < 2) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / double(n - 1)) / std::sqrt(double(n));
}

json dataset_to_json(const DatasetConfig& d) {
  json j;
  j["kind"] = d.kind;
  if (d.kind == "sin_sigmoid") {
    j["n_pool"] = d.n_pool;
    j["n_test"] = d.n_test;
  } else if (d.kind == "mogp_samples") {
    j["dims"] = d.mogp.dims;
    j["channels"] = d.mogp.channels;
    j["latents"] = d.mogp.latents;
    j["n_train"] = d.mogp.n_train;
    j["n_test"] = d.mogp.n_test;
    j["noise_y"] = d.mogp.noise_y;
    j["noise_z"] = d.mogp.noise_z;
    j["safe_quantile"] = d.mogp.safe_quantile;
  } else {
    j["path"] = d.csv_path;
    j["input_columns"] = d.csv_schema.input_columns;
    j["output_columns"] = d.csv_schema.output_columns;
    j["safety_column"] = d.csv_schema.safety_column;
    j["test_fraction"] = d.csv_schema.test_fraction;
    j["standardize"] = d.csv_schema.standardize;
    if (std::isnan(d.csv_schema.safety_threshold)) {
      j["safety_threshold"] = nullptr;
    } else {
      j["safety_threshold"] = d.csv_schema.safety_threshold;
    }
    j["safety_lower_bound"] = d.csv_schema.safety_lower_bound;
  }
  return j;
}

int dataset_channels(const DatasetConfig& d) {
  if (d.kind == "sin_sigmoid") return 2;
  if (d.kind == "mogp_samples") return d.mogp.channels;
  return static_cast<int>(d.csv_schema.output_columns.size());
}

// Random corpora for the verification subcommand.

LmcModel random_model(Rng& rng, int dim) {
  LmcModel m;
  m.channels = 1 + int(rng.uniform_int(3));
  m.latents = 1 + int(rng.uniform_int(3));
  (void)dim;
  for (int l = 0; l < m.latents; ++l) {
    const double var = rng.uniform(0.3, 2.0);
    const double ls = rng.uniform(0.6, 2.5);
    m.kernels.push_back(rng.uniform() < 0.5 ? KernelSpec::matern52(var, ls)
                                            : KernelSpec::sq_exp_iso(var, ls));
  }
  m.w = Eigen::MatrixXd::Zero(m.channels, m.latents);
  for (int p = 0; p < m.channels; ++p) {
    for (int l = 0; l < m.latents; ++l) m.w(p, l) = rng.normal(0.0, 0.8);
  }
  m.noise_vars = Eigen::VectorXd::Zero(m.channels);
  for (int p = 0; p < m.channels; ++p) m.noise_vars(p) = rng.uniform(0.05, 0.5);
  return m;
}

Eigen::MatrixXd random_points(Rng& rng, int n, int d) {
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = rng.uniform(-2.0, 2.0);
  }
  return x;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return Rng(base).derive(stream).next_u64();
}

std::string pipeline_name(Pipeline p) {
  switch (p) {
    case Pipeline::AlMogp: return "AL_MOGP";
    case Pipeline::RsMogp: return "RS_MOGP";
    case Pipeline::AlIndGps: return "AL_indGPs";
    case Pipeline::AlMogpNoSafe: return "AL_MOGP_nosafe";
  }
  return "unknown";
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j, "",
             {"dataset", "pipeline", "observation_mode", "safety", "inference", "hmc", "priors",
              "restarts", "iter_num", "repeats", "base_seed", "out_dir", "initial_nsum",
              "latents", "kernel_family"});

  ExperimentConfig cfg;

  if (!j.contains("dataset")) bad_field("dataset", "required");
  const json& dj = j["dataset"];
  if (!dj.is_object()) bad_field("dataset", "must be an object");
  if (!dj.contains("kind")) bad_field("dataset.kind", "required");
  cfg.dataset.kind = get_string(dj["kind"], "dataset.kind");
  if (cfg.dataset.kind == "sin_sigmoid") {
    check_keys(dj, "dataset", {"kind", "n_pool", "n_test"});
    if (dj.contains("n_pool")) cfg.dataset.n_pool = get_int(dj["n_pool"], "dataset.n_pool", 1, 1000000);
    if (dj.contains("n_test")) cfg.dataset.n_test = get_int(dj["n_test"], "dataset.n_test", 1, 1000000);
  } else if (cfg.dataset.kind == "mogp_samples") {
    check_keys(dj, "dataset",
               {"kind", "dims", "channels", "latents", "n_train", "n_test", "noise_y", "noise_z",
                "safe_quantile"});
    auto& p = cfg.dataset.mogp;
    if (dj.contains("dims")) p.dims = get_int(dj["dims"], "dataset.dims", 1, 16);
    if (dj.contains("channels")) p.channels = get_int(dj["channels"], "dataset.channels", 1, 64);
    if (dj.contains("latents")) p.latents = get_int(dj["latents"], "dataset.latents", 1, 64);
    if (dj.contains("n_train")) p.n_train = get_int(dj["n_train"], "dataset.n_train", 1, 1000000);
    if (dj.contains("n_test")) p.n_test = get_int(dj["n_test"], "dataset.n_test", 1, 1000000);
    if (dj.contains("noise_y")) {
      p.noise_y = get_number(dj["noise_y"], "dataset.noise_y");
      if (!(p.noise_y > 0.0)) bad_field("dataset.noise_y", "must be positive");
    }
    if (dj.contains("noise_z")) {
      p.noise_z = get_number(dj["noise_z"], "dataset.noise_z");
      if (!(p.noise_z > 0.0)) bad_field("dataset.noise_z", "must be positive");
    }
    if (dj.contains("safe_quantile")) {
      p.safe_quantile = get_number(dj["safe_quantile"], "dataset.safe_quantile");
      if (!(p.safe_quantile > 0.0 && p.safe_quantile < 1.0)) {
        bad_field("dataset.safe_quantile", "must be in (0, 1)");
      }
    }
  } else if (cfg.dataset.kind == "csv") {
    check_keys(dj, "dataset",
               {"kind", "path", "input_columns", "output_columns", "safety_column",
                "test_fraction", "standardize", "safety_threshold", "safety_lower_bound"});
    if (!dj.contains("path")) bad_field("dataset.path", "required");
    cfg.dataset.csv_path = get_string(dj["path"], "dataset.path");
    auto get_cols = [&](const char* key) {
      if (!dj.contains(key)) bad_field(std::string("dataset.") + key, "required");
      const json& a = dj[key];
      if (!a.is_array() || a.empty()) bad_field(std::string("dataset.") + key, "must be a non-empty array");
      std::vector<std::string> out;
      for (const auto& e : a) out.push_back(get_string(e, std::string("dataset.") + key));
      return out;
    };
    cfg.dataset.csv_schema.input_columns = get_cols("input_columns");
    cfg.dataset.csv_schema.output_columns = get_cols("output_columns");
    if (!dj.contains("safety_column")) bad_field("dataset.safety_column", "required");
    cfg.dataset.csv_schema.safety_column = get_string(dj["safety_column"], "dataset.safety_column");
    if (dj.contains("test_fraction")) {
      cfg.dataset.csv_schema.test_fraction = get_number(dj["test_fraction"], "dataset.test_fraction");
      if (!(cfg.dataset.csv_schema.test_fraction > 0.0 &&
            cfg.dataset.csv_schema.test_fraction < 1.0)) {
        bad_field("dataset.test_fraction", "must be in (0, 1)");
      }
    }
    if (dj.contains("standardize")) {
      cfg.dataset.csv_schema.standardize = get_bool(dj["standardize"], "dataset.standardize");
    }
    if (dj.contains("safety_threshold") && !dj["safety_threshold"].is_null()) {
      cfg.dataset.csv_schema.safety_threshold =
          get_number(dj["safety_threshold"], "dataset.safety_threshold");
    }
    if (dj.contains("safety_lower_bound")) {
      cfg.dataset.csv_schema.safety_lower_bound =
          get_bool(dj["safety_lower_bound"], "dataset.safety_lower_bound");
    }
  } else {
    bad_field("dataset.kind",
              "unknown value '" + cfg.dataset.kind +
                  "' (expected sin_sigmoid, mogp_samples, csv)");
  }

  if (!j.contains("pipeline")) bad_field("pipeline", "required");
  const std::string pl = get_string(j["pipeline"], "pipeline");
  if (pl == "AL_MOGP") cfg.run.pipeline = Pipeline::AlMogp;
  else if (pl == "RS_MOGP") cfg.run.pipeline = Pipeline::RsMogp;
  else if (pl == "AL_indGPs") cfg.run.pipeline = Pipeline::AlIndGps;
  else if (pl == "AL_MOGP_nosafe") cfg.run.pipeline = Pipeline::AlMogpNoSafe;
  else {
    bad_field("pipeline", "unknown value '" + pl +
                              "' (expected AL_MOGP, RS_MOGP, AL_indGPs, AL_MOGP_nosafe)");
  }

  if (j.contains("observation_mode")) {
    const std::string om = get_string(j["observation_mode"], "observation_mode");
    if (om == "POO") cfg.run.mode = ObservationMode::Poo;
    else if (om == "FOO") cfg.run.mode = ObservationMode::Foo;
    else bad_field("observation_mode", "unknown value '" + om + "' (expected POO, FOO)");
  }

  if (j.contains("safety")) {
    const json& sj = j["safety"];
    if (!sj.is_object()) bad_field("safety", "must be an object");
    check_keys(sj, "safety", {"z_bar", "z_mode", "delta"});
    if (sj.contains("z_bar") && !sj["z_bar"].is_null()) {
      cfg.run.safety.z_bar = get_number(sj["z_bar"], "safety.z_bar");
    } else {
      cfg.run.safety.z_bar = std::numeric_limits<double>::quiet_NaN();
    }
    if (sj.contains("z_mode")) {
      const std::string zm = get_string(sj["z_mode"], "safety.z_mode");
      if (zm == "upper") cfg.run.safety.z_mode = ZMode::UpperBound;
      else if (zm == "lower") cfg.run.safety.z_mode = ZMode::LowerBound;
      else bad_field("safety.z_mode", "unknown value '" + zm + "' (expected upper, lower)");
    }
    if (sj.contains("delta")) {
      cfg.run.safety.delta = get_number(sj["delta"], "safety.delta");
      if (!(cfg.run.safety.delta > 0.0 && cfg.run.safety.delta <= 1.0)) {
        bad_field("safety.delta", "must be in (0, 1]");
      }
    }
  } else {
    cfg.run.safety.z_bar = std::numeric_limits<double>::quiet_NaN();
  }

  if (j.contains("inference")) {
    const std::string inf = get_string(j["inference"], "inference");
    if (inf == "type_ii") cfg.run.inference = InferenceMethod::TypeII;
    else if (inf == "hmc") cfg.run.inference = InferenceMethod::Hmc;
    else bad_field("inference", "unknown value '" + inf + "' (expected type_ii, hmc)");
  }

  if (j.contains("hmc")) {
    const json& hj = j["hmc"];
    if (!hj.is_object()) bad_field("hmc", "must be an object");
    check_keys(hj, "hmc",
               {"num_results", "burn_in", "thin", "leapfrog_steps", "step_size", "target_accept",
                "adapt_fraction"});
    auto& h = cfg.run.hmc;
    if (hj.contains("num_results")) h.num_results = get_int(hj["num_results"], "hmc.num_results", 1, 1000000);
    if (hj.contains("burn_in")) h.burn_in = get_int(hj["burn_in"], "hmc.burn_in", 0, 1000000);
    if (hj.contains("thin")) h.thin = get_int(hj["thin"], "hmc.thin", 1, 1000000);
    if (hj.contains("leapfrog_steps")) {
      h.leapfrog_steps = get_int(hj["leapfrog_steps"], "hmc.leapfrog_steps", 1, 1000000);
    }
    if (hj.contains("step_size")) {
      h.step_size = get_number(hj["step_size"], "hmc.step_size");
      if (!(h.step_size > 0.0)) bad_field("hmc.step_size", "must be positive");
    }
    if (hj.contains("target_accept")) {
      h.target_accept = get_number(hj["target_accept"], "hmc.target_accept");
      if (!(h.target_accept > 0.0 && h.target_accept < 1.0)) {
        bad_field("hmc.target_accept", "must be in (0, 1)");
      }
    }
    if (hj.contains("adapt_fraction")) {
      h.adapt_fraction = get_number(hj["adapt_fraction"], "hmc.adapt_fraction");
      if (!(h.adapt_fraction >= 0.0 && h.adapt_fraction <= 1.0)) {
        bad_field("hmc.adapt_fraction", "must be in [0, 1]");
      }
    }
  }

  if (j.contains("priors")) {
    const json& pj = j["priors"];
    if (!pj.is_object()) bad_field("priors", "must be an object");
    check_keys(pj, "priors", {"kernel_variance", "kernel_lengthscale", "noise_variance", "w_stddev"});
    if (pj.contains("kernel_variance")) {
      cfg.run.priors.kernel_variance = get_gamma(pj["kernel_variance"], "priors.kernel_variance");
    }
    if (pj.contains("kernel_lengthscale")) {
      cfg.run.priors.kernel_lengthscale =
          get_gamma(pj["kernel_lengthscale"], "priors.kernel_lengthscale");
    }
    if (pj.contains("noise_variance")) {
      cfg.run.priors.noise_variance = get_gamma(pj["noise_variance"], "priors.noise_variance");
    }
    if (pj.contains("w_stddev")) {
      cfg.run.priors.w_stddev = get_number(pj["w_stddev"], "priors.w_stddev");
      if (!(cfg.run.priors.w_stddev > 0.0)) bad_field("priors.w_stddev", "must be positive");
    }
  }

  if (j.contains("restarts")) cfg.run.restarts = get_int(j["restarts"], "restarts", 1, 1000);
  if (!j.contains("iter_num")) bad_field("iter_num", "required");
  cfg.run.iter_num = get_int(j["iter_num"], "iter_num", 0, 1000000);
  if (!j.contains("repeats")) bad_field("repeats", "required");
  cfg.repeats = get_int(j["repeats"], "repeats", 1, 1000000);
  if (j.contains("base_seed")) cfg.base_seed = get_u64(j["base_seed"], "base_seed");
  if (j.contains("out_dir")) cfg.out_dir = get_string(j["out_dir"], "out_dir");
  if (j.contains("initial_nsum")) {
    cfg.run.initial_nsum = get_int(j["initial_nsum"], "initial_nsum", 1, 1000000);
  }
  const int channels = dataset_channels(cfg.dataset);
  if (cfg.run.initial_nsum % channels != 0) {
    bad_field("initial_nsum", "must be a positive multiple of the channel count (" +
                                  std::to_string(channels) + ")");
  }
  if (j.contains("latents")) cfg.run.latents = get_int(j["latents"], "latents", 0, 64);
  if (j.contains("kernel_family")) {
    const std::string kf = get_string(j["kernel_family"], "kernel_family");
    if (kf == "matern52") cfg.run.kernel_family = KernelFamily::Matern52;
    else if (kf == "sq_exp_iso") cfg.run.kernel_family = KernelFamily::SqExpIso;
    else bad_field("kernel_family", "unknown value '" + kf + "' (expected matern52, sq_exp_iso)");
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = dataset_to_json(cfg.dataset);
  j["pipeline"] = pipeline_name(cfg.run.pipeline);
  j["observation_mode"] = cfg.run.mode == ObservationMode::Poo ? "POO" : "FOO";
  json sj;
  if (std::isnan(cfg.run.safety.z_bar)) sj["z_bar"] = nullptr;
  else sj["z_bar"] = cfg.run.safety.z_bar;
  sj["z_mode"] = cfg.run.safety.z_mode == ZMode::UpperBound ? "upper" : "lower";
  sj["delta"] = cfg.run.safety.delta;
  j["safety"] = sj;
  j["inference"] = cfg.run.inference == InferenceMethod::TypeII ? "type_ii" : "hmc";
  json hj;
  hj["num_results"] = cfg.run.hmc.num_results;
  hj["burn_in"] = cfg.run.hmc.burn_in;
  hj["thin"] = cfg.run.hmc.thin;
  hj["leapfrog_steps"] = cfg.run.hmc.leapfrog_steps;
  hj["step_size"] = cfg.run.hmc.step_size;
  hj["target_accept"] = cfg.run.hmc.target_accept;
  hj["adapt_fraction"] = cfg.run.hmc.adapt_fraction;
  j["hmc"] = hj;
  json pj;
  pj["kernel_variance"] = {cfg.run.priors.kernel_variance.alpha, cfg.run.priors.kernel_variance.beta};
  pj["kernel_lengthscale"] = {cfg.run.priors.kernel_lengthscale.alpha,
                              cfg.run.priors.kernel_lengthscale.beta};
  pj["noise_variance"] = {cfg.run.priors.noise_variance.alpha, cfg.run.priors.noise_variance.beta};
  pj["w_stddev"] = cfg.run.priors.w_stddev;
  j["priors"] = pj;
  j["restarts"] = cfg.run.restarts;
  j["iter_num"] = cfg.run.iter_num;
  j["repeats"] = cfg.repeats;
  j["base_seed"] = cfg.base_seed;
  j["out_dir"] = cfg.out_dir;
  j["initial_nsum"] = cfg.run.initial_nsum;
  j["latents"] = cfg.run.latents;
  j["kernel_family"] =
      cfg.run.kernel_family == KernelFamily::Matern52 ? "matern52" : "sq_exp_iso";
  return j.dump(2);
}

int run_experiment(const ExperimentConfig& cfg, int jobs) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string pname = pipeline_name(cfg.run.pipeline);

  // Shared datasets are materialized up front; per-repeat generation happens
  // inside the workers.
  std::vector<Dataset> shared_mogp;
  Dataset shared_csv;
  std::uint64_t mogp_seed = 0;
  if (cfg.dataset.kind == "mogp_samples") {
    MogpSamplesParams params = cfg.dataset.mogp;
    params.repeats = cfg.repeats;
    mogp_seed = derive_seed(cfg.base_seed, 2ULL * cfg.repeats);
    try {
      shared_mogp = gen_mogp_samples(params, mogp_seed);
    } catch (const std::exception& e) {
      std::cerr << "dataset generation failed: " << e.what() << "\n";
      return 2;
    }
  } else if (cfg.dataset.kind == "csv") {
    try {
      shared_csv = load_csv_dataset(cfg.dataset.csv_path, cfg.dataset.csv_schema);
    } catch (const std::exception& e) {
      std::cerr << "dataset load failed: " << e.what() << "\n";
      return 2;
    }
  }

  std::vector<RepeatResult> results(cfg.repeats);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= cfg.repeats) return;
      RepeatResult& res = results[r];
      res.repeat = r;
      res.run_seed = derive_seed(cfg.base_seed, 2ULL * r + 1);
      res.file = "trajectory_" + pname + "_" + std::to_string(r) + ".csv";
      try {
        Dataset local;
        const Dataset* ds = nullptr;
        if (cfg.dataset.kind == "sin_sigmoid") {
          res.dataset_seed = derive_seed(cfg.base_seed, 2ULL * r);
          local = gen_sin_sigmoid(cfg.dataset.n_pool, cfg.dataset.n_test, res.dataset_seed);
          ds = &local;
        } else if (cfg.dataset.kind == "mogp_samples") {
          res.dataset_seed = mogp_seed;
          ds = &shared_mogp[r];
        } else {
          res.dataset_seed = 0;
          ds = &shared_csv;
        }
        res.traj = run_safe_al(cfg.run, *ds, res.run_seed);
        res.status = res.traj.status;
        write_trajectory_csv(cfg.out_dir + "/" + res.file, pname, r, res.traj);
      } catch (const std::exception& e) {
        res.failed = true;
        res.status = "failed";
        res.error = e.what();
      }
    }
  };
  const int nworkers = std::min(std::max(jobs, 1), cfg.repeats);
  if (nworkers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nworkers);
    for (int i = 0; i < nworkers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  bool any_failed = false;
  int max_iter = -1;
  for (const auto& res : results) {
    any_failed = any_failed || res.failed;
    if (!res.failed) {
      max_iter = std::max(max_iter, int(res.traj.records.size()) - 1);
    }
  }

  // Aggregate over the repeats that reached each iteration, in repeat order.
  {
    std::ofstream f(cfg.out_dir + "/aggregate.csv", std::ios::trunc);
    if (!f) {
      std::cerr << "cannot open aggregate.csv for writing\n";
      return 2;
    }
    f << "iteration,n_repeats,n_sum_mean,rmse_mean_mean,rmse_mean_stderr,"
         "test_log_density_mean,test_log_density_stderr,safety_precision_mean,"
         "safety_precision_stderr,truly_safe_fraction\n";
    for (int it = 0; it <= max_iter; ++it) {
      std::vector<double> nsum, rmse, tld, prec;
      int safe_count = 0, safe_n = 0;
      for (const auto& res : results) {
        if (res.failed || it >= int(res.traj.records.size())) continue;
        const auto& rec = res.traj.records[it];
        nsum.push_back(rec.n_sum);
        rmse.push_back(rec.metrics.rmse_mean);
        tld.push_back(rec.metrics.test_log_density);
        prec.push_back(rec.metrics.safety_precision);
        if (it > 0) {
          ++safe_n;
          safe_count += rec.truly_safe ? 1 : 0;
        }
      }
      if (nsum.empty()) continue;
      auto mean_of = [](const std::vector<double>& xs) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s / double(xs.size());
      };
      const double m_nsum = mean_of(nsum);
      const double m_rmse = mean_of(rmse);
      const double m_tld = mean_of(tld);
      const double m_prec = mean_of(prec);
      const double safe_frac =
          safe_n > 0 ? double(safe_count) / double(safe_n) : std::numeric_limits<double>::quiet_NaN();
      f << it << ',' << nsum.size() << ',' << fmt(m_nsum) << ',' << fmt(m_rmse) << ','
        << fmt(stderr_of(rmse, m_rmse)) << ',' << fmt(m_tld) << ',' << fmt(stderr_of(tld, m_tld))
        << ',' << fmt(m_prec) << ',' << fmt(stderr_of(prec, m_prec)) << ',' << fmt(safe_frac)
        << '\n';
    }
    if (!f.good()) {
      std::cerr << "write to aggregate.csv failed\n";
      return 2;
    }
  }

  {
    std::ofstream f(cfg.out_dir + "/timings.csv", std::ios::trunc);
    if (!f) {
      std::cerr << "cannot open timings.csv for writing\n";
      return 2;
    }
    f << "pipeline,repeat,iteration,inference_seconds,scoring_seconds\n";
    for (const auto& res : results) {
      if (res.failed) continue;
      for (const auto& rec : res.traj.records) {
        f << pname << ',' << res.repeat << ',' << rec.iteration << ','
          << fmt(rec.inference_seconds) << ',' << fmt(rec.scoring_seconds) << '\n';
      }
    }
  }

  {
    json manifest;
    manifest["version"] = "0.1.0";
    manifest["tool"] = "salmo";
    manifest["base_seed"] = cfg.base_seed;
    manifest["jobs"] = jobs;
    manifest["config"] = json::parse(config_to_json(cfg));
    json reps = json::array();
    for (const auto& res : results) {
      json rj;
      rj["repeat"] = res.repeat;
      rj["dataset_seed"] = res.dataset_seed;
      rj["run_seed"] = res.run_seed;
      rj["status"] = res.status;
      if (res.failed) rj["error"] = res.error;
      else rj["trajectory_file"] = res.file;
      reps.push_back(rj);
    }
    manifest["repeats_detail"] = reps;
    manifest["aggregate_file"] = "aggregate.csv";
    manifest["timings_file"] = "timings.csv";
    std::ofstream f(cfg.out_dir + "/manifest.json", std::ios::trunc);
    if (!f) {
      std::cerr << "cannot open manifest.json for writing\n";
      return 2;
    }
    f << manifest.dump(2) << '\n';
  }

  if (any_failed) {
    for (const auto& res : results) {
      if (res.failed) std::cerr << "repeat " << res.repeat << " failed: " << res.error << "\n";
    }
    return 2;
  }
  return 0;
}

int run_verification(std::uint64_t seed, int count, const std::string& report_path,
                     double c1_scale) {
  if (count < 1) throw InputError("verification count must be positive");
  std::ofstream f(report_path, std::ios::trunc);
  if (!f) {
    std::cerr << "cannot open " << report_path << " for writing\n";
    return 3;
  }
  f << "check,instance,lhs,rhs,slack,holds,precondition_ok\n";
  Rng root(seed);
  bool all_hold = true;
  auto emit = [&](const char* name, int i, const BoundReport& r) {
    f << name << ',' << i << ',' << fmt(r.lhs) << ',' << fmt(r.rhs) << ',' << fmt(r.slack) << ','
      << int(r.holds) << ',' << int(r.precondition_ok) << '\n';
    all_hold = all_hold && r.holds && r.precondition_ok;
  };
  int lemma1_pass = 0, lemma1_full_pass = 0, fischer_pass = 0, weyl_pass = 0, det_pass = 0;

  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(1000000ULL + i);
    const int d = 1 + int(rng.uniform_int(3));
    LmcModel m = random_model(rng, d);
    const int npool = 16 + int(rng.uniform_int(10));
    std::vector<IndexedPoint> pool;
    for (int k = 0; k < npool; ++k) {
      Eigen::VectorXd x(d);
      for (int t = 0; t < d; ++t) x(t) = rng.uniform(-2.0, 2.0);
      pool.push_back({x, int(rng.uniform_int(m.channels))});
    }
    const int n = 4 + int(rng.uniform_int(5));
    BoundReport r = check_lemma1(m, pool, greedy_variance_sequence(m, pool, n));
    r.rhs *= c1_scale;
    r.slack = r.rhs - r.lhs;
    r.holds = r.slack >= -1e-9;
    emit("lemma1", i, r);
    lemma1_pass += r.holds && r.precondition_ok;
  }
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(2000000ULL + i);
    const int d = 1 + int(rng.uniform_int(3));
    LmcModel m = random_model(rng, d);
    const int npool = 10 + int(rng.uniform_int(6));
    Eigen::MatrixXd pool = random_points(rng, npool, d);
    const int n = 3 + int(rng.uniform_int(3));
    BoundReport r = check_lemma1_full(m, pool, greedy_det_sequence(m, pool, n));
    emit("lemma1_full", i, r);
    lemma1_full_pass += r.holds && r.precondition_ok;
  }
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(3000000ULL + i);
    const int d = 1 + int(rng.uniform_int(3));
    LmcModel m = random_model(rng, d);
    BoundReport r = check_fischer(m, random_points(rng, 4 + int(rng.uniform_int(8)), d));
    emit("fischer", i, r);
    fischer_pass += r.holds;
  }
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(4000000ULL + i);
    const int s = 3 + int(rng.uniform_int(5));
    const int l = 2 + int(rng.uniform_int(3));
    std::vector<Eigen::MatrixXd> mats;
    for (int k = 0; k < l; ++k) {
      Eigen::MatrixXd b(s, s);
      for (int a = 0; a < s; ++a) {
        for (int c = 0; c < s; ++c) b(a, c) = rng.normal();
      }
      mats.push_back(b.transpose() * b);
    }
    BoundReport r = check_weyl(mats);
    emit("weyl", i, r);
    weyl_pass += r.holds;
  }
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(5000000ULL + i);
    const int d = 1 + int(rng.uniform_int(3));
    LmcModel m = random_model(rng, d);
    Eigen::MatrixXd x = random_points(rng, 3 + int(rng.uniform_int(8)), d);
    Eigen::VectorXd star(d);
    for (int t = 0; t < d; ++t) star(t) = rng.uniform(-2.0, 2.0);
    DetBoundsReport dr = check_det_bounds(m, x, star);
    BoundReport r;
    r.lhs = dr.det_posterior;
    r.rhs = dr.det_cap;
    r.slack = dr.slack;
    r.holds = dr.holds;
    emit("det_bounds", i, r);
    det_pass += r.holds;
  }
  std::cout << "lemma1: " << lemma1_pass << "/" << count << " hold\n"
            << "lemma1_full: " << lemma1_full_pass << "/" << count << " hold\n"
            << "fischer: " << fischer_pass << "/" << count << " hold\n"
            << "weyl: " << weyl_pass << "/" << count << " hold\n"
            << "det_bounds: " << det_pass << "/" << count << " hold\n";
  return all_hold ? 0 : 3;
}

}  // namespace salmo

#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgmcmc/core.hpp"
#include "sgmcmc/data.hpp"
#include "sgmcmc/diagnostics.hpp"
#include "sgmcmc/estimators.hpp"
#include "sgmcmc/gaussian.hpp"
#include "sgmcmc/logistic.hpp"
#include "sgmcmc/recipe.hpp"
#include "sgmcmc/samplers.hpp"
#include "sgmcmc/trace_io.hpp"

#ifndef SGMCMC_BUILD_ID
#define SGMCMC_BUILD_ID "unknown"
#endif

namespace sgmcmc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitInfeasible = 4;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class ModelKind { gaussian, logreg, csv };
enum class Algorithm { sgld, ula, sghmc, sgnht };

struct ModelConfig {
  ModelKind kind = ModelKind::gaussian;
  // gaussian
  std::vector<double> variances{2.0, 1.0};
  double rotation_angle = M_PI / 4.0;
  double grad_noise_tau2 = 0.0;
  // logreg (synthetic)
  Index n_data = 10000;
  Index dim = 10;
  double rho = 0.4;
  std::uint64_t data_seed = 1;
  double test_fraction = 0.2;
  double prior_var = 10.0;
  // csv
  std::string path;
  std::string label = "y";
};

struct SamplerConfig {
  Algorithm algorithm = Algorithm::sgld;
  EstimatorChoice estimator = EstimatorChoice::simple;
  Index subsample = 0;
  StepSchedule schedule = StepSchedule::fixed(0.1);
  Index iterations = 10000;
  Index burn_in = -1;
  Index stride = 1;
  Index inner_steps = 1;
  bool correction = false;
  Index correction_probe_replicates = 200;
  double friction = 1.0;
  double thermostat_a = 1.0;
  bool cv_refresh = false;
  Index cv_sgd_iterations = 10000;
  double cv_sgd_h0 = 0.0;  // 0: reuse the sampler step size
  std::vector<double> theta0;
};

struct DiagnosticsConfig {
  bool ksd = true;
  bool ess = true;
  bool log_loss = false;
  double c = 1.0;
  double beta = -0.5;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  ModelConfig model;
  SamplerConfig sampler;
  DiagnosticsConfig diagnostics;
};

namespace detail {

inline void check_keys(const Json& j, const std::vector<std::string>& allowed,
                       const std::string& context) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& key : allowed) {
      if (item.key() == key) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + context);
  }
}

template <typename T>
T get_or(const Json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
  detail::check_keys(j, {"seed", "output_dir", "model", "sampler", "diagnostics"}, "config");
  ExperimentConfig cfg;
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 1);
  cfg.output_dir = detail::get_or<std::string>(j, "output_dir", "out");

  if (!j.contains("model")) throw ConfigError("missing 'model' block");
  const Json& jm = j.at("model");
  detail::check_keys(jm,
                     {"kind", "variances", "rotation_angle", "grad_noise_tau2", "n_data", "dim",
                      "rho", "data_seed", "test_fraction", "prior_var", "path", "label"},
                     "model");
  const std::string kind = detail::get_or<std::string>(jm, "kind", "");
  if (kind == "gaussian") {
    cfg.model.kind = ModelKind::gaussian;
  } else if (kind == "logreg") {
    cfg.model.kind = ModelKind::logreg;
  } else if (kind == "csv") {
    cfg.model.kind = ModelKind::csv;
  } else {
    throw ConfigError("model.kind must be gaussian | logreg | csv");
  }
  cfg.model.variances = detail::get_or<std::vector<double>>(jm, "variances", cfg.model.variances);
  cfg.model.rotation_angle =
      detail::get_or<double>(jm, "rotation_angle", cfg.model.rotation_angle);
  cfg.model.grad_noise_tau2 =
      detail::get_or<double>(jm, "grad_noise_tau2", cfg.model.grad_noise_tau2);
  cfg.model.n_data = detail::get_or<Index>(jm, "n_data", cfg.model.n_data);
  cfg.model.dim = detail::get_or<Index>(jm, "dim", cfg.model.dim);
  cfg.model.rho = detail::get_or<double>(jm, "rho", cfg.model.rho);
  cfg.model.data_seed = detail::get_or<std::uint64_t>(jm, "data_seed", cfg.seed + 1000003ULL);
  cfg.model.test_fraction = detail::get_or<double>(
      jm, "test_fraction", cfg.model.kind == ModelKind::csv ? 0.0 : cfg.model.test_fraction);
  cfg.model.prior_var = detail::get_or<double>(jm, "prior_var", cfg.model.prior_var);
  cfg.model.path = detail::get_or<std::string>(jm, "path", "");
  cfg.model.label = detail::get_or<std::string>(jm, "label", "y");
  if (cfg.model.kind == ModelKind::csv && cfg.model.path.empty())
    throw ConfigError("model.path is required for kind=csv");

  if (!j.contains("sampler")) throw ConfigError("missing 'sampler' block");
  const Json& js = j.at("sampler");
  detail::check_keys(js,
                     {"algorithm", "estimator", "subsample", "h", "schedule", "iterations",
                      "burn_in", "stride", "inner_steps", "correction",
                      "correction_probe_replicates", "friction", "thermostat_a", "cv_refresh",
                      "cv_sgd_iterations", "cv_sgd_h0", "theta0"},
                     "sampler");
  const std::string algo = detail::get_or<std::string>(js, "algorithm", "sgld");
  if (algo == "sgld") {
    cfg.sampler.algorithm = Algorithm::sgld;
  } else if (algo == "ula") {
    cfg.sampler.algorithm = Algorithm::ula;
  } else if (algo == "sghmc") {
    cfg.sampler.algorithm = Algorithm::sghmc;
  } else if (algo == "sgnht") {
    cfg.sampler.algorithm = Algorithm::sgnht;
  } else {
    throw ConfigError("sampler.algorithm must be sgld | ula | sghmc | sgnht");
  }
  const std::string est = detail::get_or<std::string>(js, "estimator", "simple");
  if (est == "simple") {
    cfg.sampler.estimator = EstimatorChoice::simple;
  } else if (est == "full") {
    cfg.sampler.estimator = EstimatorChoice::full;
  } else if (est == "cv") {
    cfg.sampler.estimator = EstimatorChoice::control_variate;
  } else {
    throw ConfigError("sampler.estimator must be simple | full | cv");
  }
  if (cfg.sampler.algorithm == Algorithm::ula) cfg.sampler.estimator = EstimatorChoice::full;

  if (js.contains("h") && js.contains("schedule"))
    throw ConfigError("sampler: give either 'h' or 'schedule', not both");
  if (js.contains("h")) {
    cfg.sampler.schedule = StepSchedule::fixed(detail::get_or<double>(js, "h", 0.1));
  } else if (js.contains("schedule")) {
    const Json& js2 = js.at("schedule");
    detail::check_keys(js2, {"kind", "h0", "k0", "gamma"}, "sampler.schedule");
    const std::string sk = detail::get_or<std::string>(js2, "kind", "fixed");
    if (sk == "fixed") {
      cfg.sampler.schedule = StepSchedule::fixed(detail::get_or<double>(js2, "h0", 0.1));
    } else if (sk == "polynomial") {
      cfg.sampler.schedule = StepSchedule::polynomial(
          detail::get_or<double>(js2, "h0", 1.0), detail::get_or<double>(js2, "k0", 1.0),
          detail::get_or<double>(js2, "gamma", 1.0 / 3.0));
    } else {
      throw ConfigError("schedule.kind must be fixed | polynomial");
    }
  } else {
    throw ConfigError("sampler: missing step size ('h' or 'schedule')");
  }
  cfg.sampler.subsample = detail::get_or<Index>(js, "subsample", 0);
  cfg.sampler.iterations = detail::get_or<Index>(js, "iterations", cfg.sampler.iterations);
  cfg.sampler.burn_in = detail::get_or<Index>(js, "burn_in", -1);
  cfg.sampler.stride = detail::get_or<Index>(js, "stride", 1);
  cfg.sampler.inner_steps = detail::get_or<Index>(js, "inner_steps", 1);
  cfg.sampler.correction = detail::get_or<bool>(js, "correction", false);
  cfg.sampler.correction_probe_replicates =
      detail::get_or<Index>(js, "correction_probe_replicates", 200);
  cfg.sampler.friction = detail::get_or<double>(js, "friction", 1.0);
  cfg.sampler.thermostat_a = detail::get_or<double>(js, "thermostat_a", 1.0);
  cfg.sampler.cv_refresh = detail::get_or<bool>(js, "cv_refresh", false);
  cfg.sampler.cv_sgd_iterations = detail::get_or<Index>(js, "cv_sgd_iterations", 10000);
  cfg.sampler.cv_sgd_h0 = detail::get_or<double>(js, "cv_sgd_h0", 0.0);
  cfg.sampler.theta0 = detail::get_or<std::vector<double>>(js, "theta0", {});

  if (j.contains("diagnostics")) {
    const Json& jd = j.at("diagnostics");
    detail::check_keys(jd, {"ksd", "ess", "log_loss", "c", "beta"}, "diagnostics");
    cfg.diagnostics.ksd = detail::get_or<bool>(jd, "ksd", true);
    cfg.diagnostics.ess = detail::get_or<bool>(jd, "ess", true);
    cfg.diagnostics.log_loss = detail::get_or<bool>(jd, "log_loss", false);
    cfg.diagnostics.c = detail::get_or<double>(jd, "c", 1.0);
    cfg.diagnostics.beta = detail::get_or<double>(jd, "beta", -0.5);
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

inline Json experiment_config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  Json jm;
  switch (cfg.model.kind) {
    case ModelKind::gaussian:
      jm["kind"] = "gaussian";
      jm["variances"] = cfg.model.variances;
      jm["rotation_angle"] = cfg.model.rotation_angle;
      jm["grad_noise_tau2"] = cfg.model.grad_noise_tau2;
      break;
    case ModelKind::logreg:
      jm["kind"] = "logreg";
      jm["n_data"] = cfg.model.n_data;
      jm["dim"] = cfg.model.dim;
      jm["rho"] = cfg.model.rho;
      jm["data_seed"] = cfg.model.data_seed;
      jm["test_fraction"] = cfg.model.test_fraction;
      jm["prior_var"] = cfg.model.prior_var;
      break;
    case ModelKind::csv:
      jm["kind"] = "csv";
      jm["path"] = cfg.model.path;
      jm["label"] = cfg.model.label;
      jm["test_fraction"] = cfg.model.test_fraction;
      jm["prior_var"] = cfg.model.prior_var;
      break;
  }
  j["model"] = jm;
  Json js;
  switch (cfg.sampler.algorithm) {
    case Algorithm::sgld: js["algorithm"] = "sgld"; break;
    case Algorithm::ula: js["algorithm"] = "ula"; break;
    case Algorithm::sghmc: js["algorithm"] = "sghmc"; break;
    case Algorithm::sgnht: js["algorithm"] = "sgnht"; break;
  }
  switch (cfg.sampler.estimator) {
    case EstimatorChoice::simple: js["estimator"] = "simple"; break;
    case EstimatorChoice::full: js["estimator"] = "full"; break;
    case EstimatorChoice::control_variate: js["estimator"] = "cv"; break;
  }
  Json jsched;
  jsched["kind"] = cfg.sampler.schedule.kind == StepSchedule::Kind::fixed ? "fixed" : "polynomial";
  jsched["h0"] = cfg.sampler.schedule.h0;
  if (cfg.sampler.schedule.kind == StepSchedule::Kind::polynomial) {
    jsched["k0"] = cfg.sampler.schedule.k0;
    jsched["gamma"] = cfg.sampler.schedule.gamma;
  }
  js["schedule"] = jsched;
  js["subsample"] = cfg.sampler.subsample;
  js["iterations"] = cfg.sampler.iterations;
  js["burn_in"] = cfg.sampler.burn_in;
  js["stride"] = cfg.sampler.stride;
  js["inner_steps"] = cfg.sampler.inner_steps;
  js["correction"] = cfg.sampler.correction;
  js["friction"] = cfg.sampler.friction;
  js["thermostat_a"] = cfg.sampler.thermostat_a;
  js["cv_refresh"] = cfg.sampler.cv_refresh;
  js["cv_sgd_iterations"] = cfg.sampler.cv_sgd_iterations;
  js["cv_sgd_h0"] = cfg.sampler.cv_sgd_h0;
  js["theta0"] = cfg.sampler.theta0;
  j["sampler"] = js;
  Json jd;
  jd["ksd"] = cfg.diagnostics.ksd;
  jd["ess"] = cfg.diagnostics.ess;
  jd["log_loss"] = cfg.diagnostics.log_loss;
  jd["c"] = cfg.diagnostics.c;
  jd["beta"] = cfg.diagnostics.beta;
  j["diagnostics"] = jd;
  j["build_id"] = SGMCMC_BUILD_ID;
  return j;
}

/// Everything one chain produced: the trace, diagnostics over it, and any
/// soft failure (divergence report). Hard failures throw.
struct RunOutcome {
  Trace trace;
  DiagnosticsReport report;
  std::optional<DivergenceReport> divergence;
  DataSet synthetic_data;  // populated for logreg runs
  bool has_synthetic_data = false;
  Json data_meta;
  std::optional<Json> gaussian_summary;  // closed-form vs empirical, bench runs only
};

namespace detail {

struct PreparedModel {
  std::unique_ptr<PotentialModel> model;
  std::optional<GaussianTarget> gaussian;
  std::optional<DataSet> test_set;
  DataSet synthetic_data;
  bool has_synthetic_data = false;
  Json data_meta;
};

inline PreparedModel prepare_model(const ExperimentConfig& cfg) {
  PreparedModel out;
  switch (cfg.model.kind) {
    case ModelKind::gaussian: {
      const Index d = static_cast<Index>(cfg.model.variances.size());
      if (d < 1) throw ConfigError("model.variances must be non-empty");
      Vector vars(d);
      for (Index j = 0; j < d; ++j) vars[j] = cfg.model.variances[static_cast<std::size_t>(j)];
      Matrix p = Matrix::Identity(d, d);
      if (d == 2) {
        const double a = cfg.model.rotation_angle;
        p << std::cos(a), std::sin(a), -std::sin(a), std::cos(a);
      }
      out.gaussian.emplace(std::move(p), std::move(vars));
      out.model = std::make_unique<GaussianPotential>(*out.gaussian);
      return out;
    }
    case ModelKind::logreg: {
      RngStream data_rng(cfg.model.data_seed);
      Vector theta_true(cfg.model.dim);
      data_rng.normal_vec(theta_true);
      DataSet all =
          simulate_logreg(cfg.model.n_data, cfg.model.dim, cfg.model.rho, theta_true, data_rng);
      out.data_meta["data_seed"] = cfg.model.data_seed;
      out.data_meta["rho"] = cfg.model.rho;
      out.data_meta["theta_true"] = std::vector<double>(theta_true.begin(), theta_true.end());
      if (cfg.model.test_fraction > 0.0) {
        auto [train, test] = split_dataset(all, cfg.model.test_fraction, data_rng);
        out.test_set = std::move(test);
        out.model = std::make_unique<LogisticModel>(
            LogisticModel::from_dataset(train, cfg.model.prior_var));
      } else {
        out.model = std::make_unique<LogisticModel>(
            LogisticModel::from_dataset(all, cfg.model.prior_var));
      }
      out.synthetic_data = std::move(all);
      out.has_synthetic_data = true;
      return out;
    }
    case ModelKind::csv: {
      DataSet all = load_dataset(cfg.model.path, cfg.model.label);
      if (all.label_kind != LabelKind::binary)
        throw ConfigError("csv model requires binary 0/1 labels");
      if (cfg.model.test_fraction > 0.0) {
        RngStream split_rng(cfg.seed + 7777ULL);
        auto [train, test] = split_dataset(all, cfg.model.test_fraction, split_rng);
        out.test_set = std::move(test);
        out.model = std::make_unique<LogisticModel>(
            LogisticModel::from_dataset(train, cfg.model.prior_var));
      } else {
        out.model = std::make_unique<LogisticModel>(
            LogisticModel::from_dataset(all, cfg.model.prior_var));
      }
      return out;
    }
  }
  throw ConfigError("unreachable model kind");
}

inline RunConfig to_run_config(const SamplerConfig& s, Index dim) {
  RunConfig rc;
  rc.iterations = s.iterations;
  rc.burn_in = s.burn_in;
  rc.stride = s.stride;
  rc.subsample = s.subsample;
  rc.estimator = s.estimator;
  rc.schedule = s.schedule;
  rc.inner_steps = s.inner_steps;
  rc.cv_refresh = s.cv_refresh;
  if (!s.theta0.empty()) {
    if (static_cast<Index>(s.theta0.size()) != dim)
      throw ConfigError("sampler.theta0 length does not match the model dimension");
    rc.theta0.resize(dim);
    for (Index j = 0; j < dim; ++j) rc.theta0[j] = s.theta0[static_cast<std::size_t>(j)];
  }
  return rc;
}

struct GaussianLangevinOut {
  RunResult result;
  Json summary;
};

/// Langevin runs on the analytic Gaussian bench go through the exact
/// recursion, which also handles gradient noise and its correction. The
/// summary pairs the empirical rotated variances with their closed forms.
inline GaussianLangevinOut run_gaussian_langevin(const GaussianTarget& target,
                                                 const ExperimentConfig& cfg, RngStream& rng) {
  const RunConfig rc = to_run_config(cfg.sampler, target.dim());
  rc.validate();
  if (cfg.sampler.schedule.kind != StepSchedule::Kind::fixed)
    throw ConfigError("the gaussian bench runs with a fixed step size");
  const double h = cfg.sampler.schedule.h0;
  GaussianSimOptions opts;
  opts.burn_in = rc.resolved_burn_in();
  opts.stride = rc.stride;
  opts.record_trace = true;
  const double tau2 = cfg.model.grad_noise_tau2;
  const NoiseSpec noise(tau2);
  const Vector theta0 = rc.theta0.size() == 0 ? Vector(Vector::Zero(target.dim())) : rc.theta0;

  GaussianRunStats stats;
  if (cfg.sampler.correction) {
    stats = corrected_simulate(target, h, noise, rc.iterations, rng, opts);
  } else {
    stats = ar_simulate(target, h, noise, rc.iterations, theta0, rng, opts);
  }

  GaussianLangevinOut out;
  out.summary["h"] = h;
  out.summary["tau2"] = tau2;
  out.summary["correction"] = cfg.sampler.correction;
  out.summary["empirical_var"] =
      std::vector<double>(stats.rotated_variance.begin(), stats.rotated_variance.end());
  if (h < 4.0 * target.min_variance()) {
    const Vector v_rot = cfg.sampler.correction ? Vector(Vector::Zero(target.dim()))
                                                : Vector(Vector::Constant(target.dim(), tau2));
    const StationaryVariance sv = stationary_variance(target, h, v_rot);
    out.summary["closed_form_var"] =
        std::vector<double>(sv.per_component.begin(), sv.per_component.end());
    std::vector<double> err(static_cast<std::size_t>(target.dim()));
    for (Index j = 0; j < target.dim(); ++j) {
      err[static_cast<std::size_t>(j)] =
          std::abs(stats.rotated_variance[j] - sv.per_component[j]) / sv.per_component[j];
    }
    out.summary["abs_rel_err"] = err;
  }
  out.result.trace = std::move(stats.trace);
  if (stats.diverged_at) {
    out.result.divergence =
        DivergenceReport{*stats.diverged_at, "state exceeded the divergence guard"};
  }
  return out;
}

inline RunResult execute_sampler(const ExperimentConfig& cfg, const PreparedModel& prep,
                                 RngStream& rng, std::optional<Json>* gaussian_summary) {
  const PotentialModel& model = *prep.model;
  const bool gaussian_langevin =
      prep.gaussian && (cfg.sampler.algorithm == Algorithm::sgld ||
                        cfg.sampler.algorithm == Algorithm::ula);
  if (gaussian_langevin) {
    GaussianLangevinOut out = run_gaussian_langevin(*prep.gaussian, cfg, rng);
    if (gaussian_summary) *gaussian_summary = std::move(out.summary);
    return std::move(out.result);
  }

  RunConfig rc = to_run_config(cfg.sampler, model.dim());
  rc.validate();

  std::optional<RecipeSpec> spec;
  if (cfg.sampler.algorithm == Algorithm::sghmc) {
    spec = make_sghmc_spec(model.dim(), cfg.sampler.friction);
  } else if (cfg.sampler.algorithm == Algorithm::sgnht) {
    spec = make_sgnht_spec(model.dim(), cfg.sampler.thermostat_a);
  }

  NoiseCorrection correction = NoiseCorrection::off();
  GradientOracle oracle;
  if (cfg.sampler.estimator != EstimatorChoice::control_variate) {
    oracle = oracle_from_config(model, rc);
    if (prep.gaussian && cfg.model.grad_noise_tau2 > 0.0)
      oracle = make_noisy_oracle(std::move(oracle), cfg.model.grad_noise_tau2);
    if (cfg.sampler.correction) {
      if (prep.gaussian) {
        correction = NoiseCorrection::with(
            Matrix(cfg.model.grad_noise_tau2 * Matrix::Identity(model.dim(), model.dim())));
      } else {
        RngStream probe_rng(cfg.seed + 424243ULL);
        const Vector theta0 =
            rc.theta0.size() == 0 ? Vector::Zero(model.dim()) : rc.theta0;
        correction = NoiseCorrection::with(variance_probe(
            oracle, theta0, cfg.sampler.correction_probe_replicates, probe_rng));
      }
    }
  }

  if (cfg.sampler.estimator == EstimatorChoice::control_variate) {
    SgdConfig sgd;
    sgd.iterations = cfg.sampler.cv_sgd_iterations;
    sgd.batch_size = cfg.sampler.subsample;
    const double h0 = cfg.sampler.cv_sgd_h0 > 0.0 ? cfg.sampler.cv_sgd_h0
                                                  : cfg.sampler.schedule.h0;
    sgd.schedule = StepSchedule::polynomial(h0);
    sgd.theta0 = rc.theta0;
    return run_cv_pipeline(model, rc, sgd, rng, spec ? &*spec : nullptr).run;
  }
  if (spec) return run_recipe(model.dim(), *spec, oracle, rc, rng, correction);
  return run_sgld(model.dim(), oracle, rc, rng);
}

}  // namespace detail

/// Runs one configured chain and computes the requested diagnostics on its
/// trace. Hard errors (bad config, infeasible correction) throw; divergence
/// is reported inside the outcome together with the partial trace.
inline RunOutcome execute_experiment(const ExperimentConfig& cfg) {
  detail::PreparedModel prep = detail::prepare_model(cfg);
  RngStream rng(cfg.seed);
  RunOutcome out;
  RunResult result = detail::execute_sampler(cfg, prep, rng, &out.gaussian_summary);
  out.divergence = result.divergence;
  out.trace = std::move(result.trace);
  out.synthetic_data = std::move(prep.synthetic_data);
  out.has_synthetic_data = prep.has_synthetic_data;
  out.data_meta = std::move(prep.data_meta);

  const auto t0 = std::chrono::steady_clock::now();
  if (out.trace.stored() > 0) {
    if (cfg.diagnostics.ksd) {
      out.report.ksd = ksd(out.trace.states, out.trace.grads,
                           KsdConfig(cfg.diagnostics.c, cfg.diagnostics.beta));
    }
    if (cfg.diagnostics.ess && out.trace.stored() >= 10) {
      out.report.ess_per_dim.resize(out.trace.dim());
      bool degenerate = false;
      for (Index j = 0; j < out.trace.dim(); ++j) {
        const EssResult r = ess(out.trace.states.col(j));
        out.report.ess_per_dim[j] = r.value;
        degenerate = degenerate || r.degenerate;
      }
      out.report.min_ess = out.report.ess_per_dim.minCoeff();
      out.report.ess_degenerate = degenerate;
    }
    if ((cfg.diagnostics.log_loss || prep.test_set) && prep.test_set &&
        prep.test_set->count() > 0) {
      out.report.log_loss =
          log_loss_binary(out.trace, prep.test_set->features, prep.test_set->labels);
    }
  }
  out.trace.timings.diagnostics_sec = detail::seconds_since(t0);
  out.report.wall_clock_sec = out.trace.timings.optimization_sec +
                              out.trace.timings.sampling_sec +
                              out.trace.timings.diagnostics_sec;
  return out;
}

/// `run <config.json>`: writes trace.csv, config-echo.json and
/// diagnostics.json under the config's output directory. Returns 0 on
/// success, 2 on config errors, 3 on divergence, 4 on infeasible correction.
inline int cmd_run(const std::filesystem::path& config_path, std::ostream& log) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(config_path);
  } catch (const std::exception& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    std::filesystem::create_directories(cfg.output_dir);
    const RunOutcome outcome = execute_experiment(cfg);
    const std::filesystem::path dir(cfg.output_dir);
    write_trace_csv(dir / "trace.csv", outcome.trace);
    write_file_atomic(dir / "config-echo.json", experiment_config_to_json(cfg).dump(2) + "\n");
    write_file_atomic(dir / "diagnostics.json",
                      diagnostics_to_json(outcome.report, &outcome.trace.timings).dump(2) + "\n");
    if (outcome.has_synthetic_data) {
      write_file_atomic(dir / "data.csv", dataset_to_csv(outcome.synthetic_data));
      write_file_atomic(dir / "data-meta.json", outcome.data_meta.dump(2) + "\n");
    }
    if (outcome.gaussian_summary) {
      write_file_atomic(dir / "gaussian-summary.json", outcome.gaussian_summary->dump(2) + "\n");
    }
    if (outcome.divergence) {
      Json err;
      err["error"] = "divergence";
      err["iteration"] = outcome.divergence->iteration;
      err["message"] = outcome.divergence->message;
      write_file_atomic(dir / "error-report.json", err.dump(2) + "\n");
      log << "divergence at iteration " << outcome.divergence->iteration << ": "
          << outcome.divergence->message << "\n";
      return kExitDivergence;
    }
    return kExitOk;
  } catch (const CorrectionInfeasibleError& e) {
    Json err;
    err["error"] = "correction_infeasible";
    err["message"] = e.what();
    err["min_eigenvalue"] = e.min_eigenvalue();
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(std::filesystem::path(cfg.output_dir) / "error-report.json",
                      err.dump(2) + "\n");
    log << "correction infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    log << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const OptimizationError& e) {
    Json err;
    err["error"] = "optimization_failure";
    err["message"] = e.what();
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(std::filesystem::path(cfg.output_dir) / "error-report.json",
                      err.dump(2) + "\n");
    log << "optimization failure: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const DivergenceError& e) {
    Json err;
    err["error"] = "divergence";
    err["message"] = e.what();
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(std::filesystem::path(cfg.output_dir) / "error-report.json",
                      err.dump(2) + "\n");
    log << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  }
}

struct SweepRow {
  double h = 0.0;
  std::optional<double> ksd;
  std::optional<double> min_ess;
  double wall_clock_sec = 0.0;
  std::string status = "ok";
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::optional<double> argmin_ksd_h;
  std::optional<double> argmax_ess_h;
};

/// One chain per step size, in parallel; per-row failures are recorded in
/// the row and do not stop the sweep. Rows are mutually independent: each
/// one re-derives its model and stream from the shared base config.
inline SweepReport run_sweep(const ExperimentConfig& base, const std::vector<double>& step_sizes,
                             int workers = 0) {
  if (step_sizes.size() < 2) throw ConfigError("sweep needs at least two step sizes");
  SweepReport report;
  report.rows.resize(step_sizes.size());

  std::atomic<std::size_t> next{0};
  const auto run_row = [&](std::size_t r) {
    SweepRow& row = report.rows[r];
    row.h = step_sizes[r];
    try {
      ExperimentConfig cfg = base;
      cfg.sampler.schedule = StepSchedule::fixed(row.h);
      const auto t0 = std::chrono::steady_clock::now();
      const RunOutcome outcome = execute_experiment(cfg);
      row.wall_clock_sec = detail::seconds_since(t0);
      if (outcome.divergence) {
        row.status = "divergence at iteration " + std::to_string(outcome.divergence->iteration);
        return;
      }
      row.ksd = outcome.report.ksd;
      if (outcome.report.ess_per_dim.size() > 0) row.min_ess = outcome.report.min_ess;
    } catch (const std::exception& e) {
      row.status = e.what();
    }
  };

  const int n_workers =
      std::min<int>(resolve_workers(workers), static_cast<int>(step_sizes.size()));
  if (n_workers <= 1) {
    for (std::size_t r = 0; r < step_sizes.size(); ++r) run_row(r);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t r = next.fetch_add(1); r < step_sizes.size(); r = next.fetch_add(1))
          run_row(r);
      });
    }
    for (auto& th : pool) th.join();
  }

  double best_ksd = std::numeric_limits<double>::max();
  double best_ess = -1.0;
  for (const SweepRow& row : report.rows) {
    if (row.status != "ok") continue;
    if (row.ksd && *row.ksd < best_ksd) {
      best_ksd = *row.ksd;
      report.argmin_ksd_h = row.h;
    }
    if (row.min_ess && *row.min_ess > best_ess) {
      best_ess = *row.min_ess;
      report.argmax_ess_h = row.h;
    }
  }
  return report;
}

inline std::string sweep_to_csv(const SweepReport& report) {
  std::string out = "h,ksd,min_ess,wall_clock_sec,status\n";
  for (const SweepRow& row : report.rows) {
    out += detail::format_double(row.h);
    out += ",";
    out += row.ksd ? detail::format_double(*row.ksd) : "";
    out += ",";
    out += row.min_ess ? detail::format_double(*row.min_ess) : "";
    out += "," + detail::format_double(row.wall_clock_sec);
    out += ",\"" + row.status + "\"\n";
  }
  return out;
}

/// `sweep <config.json> --h ...`
inline int cmd_sweep(const std::filesystem::path& config_path,
                     const std::vector<double>& step_sizes, std::ostream& log, int workers = 0) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(config_path);
    if (step_sizes.size() < 2) throw ConfigError("sweep needs at least two step sizes");
  } catch (const std::exception& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const SweepReport report = run_sweep(cfg, step_sizes, workers);
  std::filesystem::create_directories(cfg.output_dir);
  const std::filesystem::path dir(cfg.output_dir);
  write_file_atomic(dir / "sweep.csv", sweep_to_csv(report));
  Json j;
  if (report.argmin_ksd_h) j["argmin_ksd_h"] = *report.argmin_ksd_h;
  if (report.argmax_ess_h) j["argmax_ess_h"] = *report.argmax_ess_h;
  write_file_atomic(dir / "sweep-summary.json", j.dump(2) + "\n");
  if (report.argmin_ksd_h) log << "argmin-KSD h = " << *report.argmin_ksd_h << "\n";
  if (report.argmax_ess_h) log << "argmax-ESS h = " << *report.argmax_ess_h << "\n";
  return kExitOk;
}

/// `diagnose <trace.csv> [--ksd] [--ess]`: offline recomputation on a stored
/// trace; identical inputs give values identical to the in-run diagnostics.
inline int cmd_diagnose(const std::filesystem::path& trace_path, bool want_ksd, bool want_ess,
                        double c, double beta, const std::filesystem::path& out_path,
                        std::ostream& log) {
  LoadedTrace loaded;
  try {
    loaded = read_trace_csv(trace_path);
    if (want_ksd && !loaded.has_grads)
      throw ConfigError("trace has no gradient columns; cannot compute the kernel Stein metric");
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  const auto t0 = std::chrono::steady_clock::now();
  DiagnosticsReport report;
  try {
    if (want_ksd) {
      report.ksd = ksd(loaded.trace.states, loaded.trace.grads, KsdConfig(c, beta));
    }
    if (want_ess) {
      report.ess_per_dim.resize(loaded.trace.dim());
      bool degenerate = false;
      for (Index j = 0; j < loaded.trace.dim(); ++j) {
        const EssResult r = ess(loaded.trace.states.col(j));
        report.ess_per_dim[j] = r.value;
        degenerate = degenerate || r.degenerate;
      }
      report.min_ess = report.ess_per_dim.minCoeff();
      report.ess_degenerate = degenerate;
    }
  } catch (const ArgumentError& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  report.wall_clock_sec = detail::seconds_since(t0);
  const Json j = diagnostics_to_json(report);
  if (!out_path.empty()) write_file_atomic(out_path, j.dump(2) + "\n");
  log << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace sgmcmc

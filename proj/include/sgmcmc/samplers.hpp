#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <utility>

#include "sgmcmc/core.hpp"
#include "sgmcmc/estimators.hpp"
#include "sgmcmc/model.hpp"
#include "sgmcmc/recipe.hpp"
#include "sgmcmc/schedule.hpp"

namespace sgmcmc {

enum class EstimatorChoice { full, simple, control_variate };

struct RunConfig {
  Index iterations = 0;
  Index burn_in = -1;  // -1 resolves to iterations / 2
  Index stride = 1;
  Index subsample = 0;  // 0 means full batch
  EstimatorChoice estimator = EstimatorChoice::simple;
  StepSchedule schedule = StepSchedule::fixed(0.0);
  Index inner_steps = 1;
  bool redraw_inner = true;  // fresh minibatch per inner step
  bool cv_refresh = false;
  Vector theta0;

  Index resolved_burn_in() const { return burn_in < 0 ? iterations / 2 : burn_in; }

  void validate() const {
    if (iterations < 1) throw ArgumentError("RunConfig: iterations must be >= 1");
    if (resolved_burn_in() >= iterations)
      throw ArgumentError("RunConfig: burn-in must be smaller than the iteration count");
    if (stride < 1) throw ArgumentError("RunConfig: stride must be >= 1");
    if (inner_steps < 1) throw ArgumentError("RunConfig: inner steps must be >= 1");
  }
};

struct PhaseTimings {
  double optimization_sec = 0.0;
  double sampling_sec = 0.0;
  double diagnostics_sec = 0.0;
};

struct DivergenceReport {
  Index iteration = 0;
  std::string message;
};

/// Post-burn-in, thinned record of a run: parameter states plus the gradient
/// estimate that was evaluated at each stored state (kernel Stein reads the
/// latter as noisy score estimates). Rows = floor((K - burn_in) / stride).
struct Trace {
  Matrix states;  // M x d
  Matrix grads;   // M x d
  std::vector<Index> iterations;
  PhaseTimings timings;

  Index stored() const { return states.rows(); }
  Index dim() const { return states.cols(); }
};

struct RunResult {
  Trace trace;
  std::optional<DivergenceReport> divergence;
};

namespace detail {

class TraceBuilder {
 public:
  TraceBuilder(Index capacity, Index dim) : next_(0) {
    trace_.states.resize(capacity, dim);
    trace_.grads.resize(capacity, dim);
    trace_.iterations.reserve(static_cast<std::size_t>(capacity));
  }

  void push(const Vector& theta, const Vector& grad, Index iteration) {
    trace_.states.row(next_) = theta.transpose();
    trace_.grads.row(next_) = grad.transpose();
    trace_.iterations.push_back(iteration);
    ++next_;
  }

  Trace finish() {
    trace_.states.conservativeResize(next_, Eigen::NoChange);
    trace_.grads.conservativeResize(next_, Eigen::NoChange);
    return std::move(trace_);
  }

 private:
  Trace trace_;
  Index next_;
};

inline Index stored_capacity(const RunConfig& config) {
  return (config.iterations - config.resolved_burn_in()) / config.stride;
}

inline bool store_at(const RunConfig& config, Index k) {
  const Index burn = config.resolved_burn_in();
  return k >= burn && (k - burn + 1) % config.stride == 0;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Langevin update loop
///   theta_{k+1} = theta_k - (h_k/2) * ghat(theta_k) + xi_k,  xi_k ~ N(0, h_k I),
/// against an arbitrary gradient oracle. Deterministic given the stream; a
/// tripped divergence guard ends the run with the partial trace and a report.
inline RunResult run_sgld(Index dim, const GradientOracle& oracle, const RunConfig& config,
                          RngStream& rng) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Vector theta = config.theta0.size() == 0 ? Vector::Zero(dim) : config.theta0;
  if (theta.size() != dim) throw ArgumentError("run_sgld: theta0 has wrong length");

  detail::TraceBuilder builder(detail::stored_capacity(config), dim);
  RunResult result;
  GradientEstimate est;
  Vector z(dim);
  for (Index k = 0; k < config.iterations; ++k) {
    const double h = config.schedule.at(k);
    try {
      oracle(theta, rng, est);
    } catch (const DivergenceError& e) {
      result.divergence = DivergenceReport{k, e.what()};
      break;
    }
    if (detail::store_at(config, k)) builder.push(theta, est.vector, k);
    rng.normal_vec(z);
    theta -= (h / 2.0) * est.vector;
    theta += std::sqrt(h) * z;
    if (!all_finite(theta) || theta.cwiseAbs().maxCoeff() > kDivergenceGuard) {
      result.divergence = DivergenceReport{k, "state exceeded the divergence guard"};
      break;
    }
  }
  result.trace = builder.finish();
  result.trace.timings.sampling_sec = detail::seconds_since(t0);
  return result;
}

inline GradientOracle oracle_from_config(const PotentialModel& model, const RunConfig& config) {
  const Index n = config.subsample;
  if (config.estimator == EstimatorChoice::full || n == 0 || n == model.data_count())
    return make_full_oracle(model);
  return make_simple_oracle(model, n);
}

inline RunResult run_sgld(const PotentialModel& model, const RunConfig& config, RngStream& rng) {
  if (config.estimator == EstimatorChoice::control_variate)
    throw ArgumentError("run_sgld: use run_cv_pipeline for the control-variate estimator");
  return run_sgld(model.dim(), oracle_from_config(model, config), config, rng);
}

/// Called at every stored iteration with the full augmented state, for
/// consumers that need the auxiliary blocks (the trace keeps theta only).
using StateObserver = std::function<void(Index, const Vector&)>;

/// Generic loop over euler steps of a recipe. Momentum blocks start at
/// N(0, I) draws and the thermostat at its spec-declared value; both are
/// consumed from the stream before the first iteration. With the overdamped
/// spec the output is bit-identical to run_sgld under one seed.
inline RunResult run_recipe(Index dim, const RecipeSpec& spec, const GradientOracle& oracle,
                            const RunConfig& config, RngStream& rng,
                            NoiseCorrection correction = NoiseCorrection::off(),
                            const StateObserver& observer = {}) {
  config.validate();
  if (spec.layout.theta_dim != dim)
    throw ArgumentError("run_recipe: spec layout does not match the model dimension");
  {
    RngStream check_rng(0x5eed5eedULL);
    validate_recipe(spec, 5, check_rng);
  }

  const auto t0 = std::chrono::steady_clock::now();
  const Index s = spec.layout.state_dim();
  Vector zeta = Vector::Zero(s);
  if (config.theta0.size() != 0) {
    if (config.theta0.size() != dim) throw ArgumentError("run_recipe: theta0 has wrong length");
    zeta.head(dim) = config.theta0;
  }
  if (spec.layout.has_momentum) rng.normal_vec(zeta.segment(dim, dim));
  if (spec.layout.has_thermostat) zeta[s - 1] = spec.thermostat_init;

  detail::TraceBuilder builder(detail::stored_capacity(config), dim);
  RunResult result;
  GradientEstimate est;
  std::optional<StepKernel> kernel;
  double kernel_h = -1.0;
  Vector theta(dim);
  for (Index k = 0; k < config.iterations; ++k) {
    const double h = config.schedule.at(k);
    if (h != kernel_h) {
      kernel.emplace(spec, h, correction);
      kernel_h = h;
    }
    bool stop = false;
    for (Index l = 0; l < config.inner_steps; ++l) {
      theta = zeta.head(dim);
      if (l == 0 || config.redraw_inner) {
        try {
          oracle(theta, rng, est);
        } catch (const DivergenceError& e) {
          result.divergence = DivergenceReport{k, e.what()};
          stop = true;
          break;
        }
      }
      if (l == 0 && detail::store_at(config, k)) {
        builder.push(theta, est.vector, k);
        if (observer) observer(k, zeta);
      }
      zeta = kernel->step(zeta, est.vector, rng);
      if (!all_finite(zeta) || zeta.cwiseAbs().maxCoeff() > kDivergenceGuard) {
        result.divergence = DivergenceReport{k, "state exceeded the divergence guard"};
        stop = true;
        break;
      }
    }
    if (stop) break;
  }
  result.trace = builder.finish();
  result.trace.timings.sampling_sec = detail::seconds_since(t0);
  return result;
}

inline RunResult run_recipe(const PotentialModel& model, const RecipeSpec& spec,
                            const RunConfig& config, RngStream& rng,
                            NoiseCorrection correction = NoiseCorrection::off(),
                            const StateObserver& observer = {}) {
  return run_recipe(model.dim(), spec, oracle_from_config(model, config), config, rng,
                    std::move(correction), observer);
}

struct CvPipelineResult {
  RunResult run;
  ControlVariateState cv;
};

/// Two-phase control-variate pipeline: SGD to an anchor with a full cache
/// fill, then sampling started from the anchor with the control-variate
/// estimator. An SGD failure aborts before any sampling happens.
inline CvPipelineResult run_cv_pipeline(const PotentialModel& model, const RunConfig& config,
                                        const SgdConfig& sgd, RngStream& rng,
                                        const RecipeSpec* spec = nullptr) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  CvPipelineResult out;
  out.cv = cv_prepare(model, sgd, rng);
  const double optimization_sec = detail::seconds_since(t0);

  RunConfig sampling = config;
  sampling.theta0 = out.cv.anchor;
  const Index n = sampling.subsample == 0 ? model.data_count() : sampling.subsample;
  const GradientOracle oracle = make_cv_oracle(model, out.cv, n, sampling.cv_refresh);
  out.run = spec ? run_recipe(model.dim(), *spec, oracle, sampling, rng)
                 : run_sgld(model.dim(), oracle, sampling, rng);
  out.run.trace.timings.optimization_sec = optimization_sec;
  return out;
}

}  // namespace sgmcmc

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sgmcmc/core.hpp"
#include "sgmcmc/model.hpp"
#include "sgmcmc/schedule.hpp"

namespace sgmcmc {

enum class EstimatorTag { full, simple, control_variate, weighted };

inline const char* to_string(EstimatorTag tag) {
  switch (tag) {
    case EstimatorTag::full: return "full";
    case EstimatorTag::simple: return "simple";
    case EstimatorTag::control_variate: return "cv";
    case EstimatorTag::weighted: return "weighted";
  }
  return "?";
}

/// One realisation of an unbiased estimate of grad U(theta), together with
/// the batch that produced it.
struct GradientEstimate {
  Vector vector;
  MiniBatch batch;
  EstimatorTag tag = EstimatorTag::simple;
};

/// Exact full-data gradient (the n = N degenerate case).
inline GradientEstimate estimate_full(const PotentialModel& model, const Vector& theta) {
  GradientEstimate est;
  est.tag = EstimatorTag::full;
  est.batch.population = model.data_count();
  est.vector.resize(model.dim());
  model.grad_full(theta, est.vector);
  if (!all_finite(est.vector)) throw DivergenceError("full gradient is non-finite");
  return est;
}

/// (N/n) * sum_{i in batch} grad U_i(theta).
inline GradientEstimate estimate_simple(const PotentialModel& model, const Vector& theta,
                                        MiniBatch batch) {
  const Index n = batch.size();
  const Index N = model.data_count();
  if (n < 1 || n > N) throw ArgumentError("estimate_simple: batch size outside [1, N]");
  GradientEstimate est;
  est.tag = EstimatorTag::simple;
  est.vector.resize(model.dim());
  model.grad_sum(theta, batch.indices, est.vector);
  est.vector *= static_cast<double>(N) / static_cast<double>(n);
  est.batch = std::move(batch);
  return est;
}

/// Anchor point with the cached per-datum gradients at the anchor and their
/// running sum. cv_refresh_anchors keeps the sum consistent with the rows.
/// Refreshing is a single-writer operation; concurrent reads are fine
/// between refreshes.
struct ControlVariateState {
  Vector anchor;        // theta_hat
  Matrix anchor_grads;  // N x d, row i = cached grad U_i
  Vector anchor_sum;    // column sum of anchor_grads

  Index data_count() const { return anchor_grads.rows(); }

  double sum_consistency_error() const {
    const Vector recomputed = anchor_grads.colwise().sum().transpose();
    const double scale = std::max(1.0, recomputed.norm());
    return (recomputed - anchor_sum).norm() / scale;
  }
};

struct SgdConfig {
  Index iterations = 0;
  Index batch_size = 0;  // 0 means full batch
  StepSchedule schedule = StepSchedule::polynomial(1.0);
  Vector theta0;
  std::uint64_t divergence_guard = 0;  // unused; guard fixed at kDivergenceGuard
};

namespace detail {

inline void fill_anchor_cache(const PotentialModel& model, ControlVariateState& state) {
  const Index N = model.data_count();
  const Index d = model.dim();
  state.anchor_grads.resize(N, d);
  state.anchor_sum = Vector::Zero(d);
  Vector g(d);
  for (Index i = 0; i < N; ++i) {
    model.grad_datum(state.anchor, i, g);
    if (!all_finite(g))
      throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1) +
                            " while filling anchor cache");
    state.anchor_grads.row(i) = g.transpose();
    state.anchor_sum += g;
  }
}

}  // namespace detail

/// Locates an anchor near the mode by stochastic gradient descent
/// (theta <- theta - h_k * simple estimate), then caches grad U_i at the
/// anchor for every datum in one O(N d) pass.
inline ControlVariateState cv_prepare(const PotentialModel& model, const SgdConfig& config,
                                      RngStream& rng) {
  if (config.iterations < 0) throw ArgumentError("cv_prepare: negative iteration count");
  const Index N = model.data_count();
  const Index n = config.batch_size == 0 ? N : config.batch_size;
  if (n < 1 || n > N) throw ArgumentError("cv_prepare: batch size outside [1, N]");

  Vector theta = config.theta0.size() == 0 ? Vector::Zero(model.dim()) : config.theta0;
  if (theta.size() != model.dim()) throw ArgumentError("cv_prepare: theta0 has wrong length");

  for (Index k = 0; k < config.iterations; ++k) {
    MiniBatch batch = sample_minibatch(N, n, rng);
    const GradientEstimate est = estimate_simple(model, theta, std::move(batch));
    theta -= config.schedule.at(k) * est.vector;
    if (!all_finite(theta) || theta.cwiseAbs().maxCoeff() > kDivergenceGuard) {
      throw OptimizationError("cv_prepare: SGD diverged at iteration " + std::to_string(k));
    }
  }

  ControlVariateState state;
  state.anchor = std::move(theta);
  detail::fill_anchor_cache(model, state);
  return state;
}

/// Control-variate estimate
///   sum_i u_i + (N/n) * sum_{i in batch} (grad U_i(theta) - u_i),
/// with u_i the cached anchor gradients. Exactly anchor_sum at the anchor.
inline GradientEstimate estimate_cv(const PotentialModel& model, const ControlVariateState& state,
                                    const Vector& theta, MiniBatch batch) {
  const Index n = batch.size();
  const Index N = model.data_count();
  if (state.data_count() != N)
    throw ArgumentError("estimate_cv: anchor cache prepared for a different model");
  if (n < 1 || n > N) throw ArgumentError("estimate_cv: batch size outside [1, N]");

  Vector correction = Vector::Zero(model.dim());
  Vector g(model.dim());
  for (const Index i : batch.indices) {
    model.grad_datum(theta, i, g);
    if (!all_finite(g))
      throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1));
    correction += g - state.anchor_grads.row(i).transpose();
  }
  GradientEstimate est;
  est.tag = EstimatorTag::control_variate;
  est.vector = state.anchor_sum +
               (static_cast<double>(N) / static_cast<double>(n)) * correction;
  est.batch = std::move(batch);
  return est;
}

/// Re-anchors the cached rows for the given batch at theta_now and updates
/// the sum by the row deltas, O(n d). An empty batch is a no-op.
inline void cv_refresh_anchors(ControlVariateState& state, const MiniBatch& batch,
                               const Vector& theta_now, const PotentialModel& model) {
  Vector g(model.dim());
  for (const Index i : batch.indices) {
    if (i < 0 || i >= state.data_count())
      throw ArgumentError("cv_refresh_anchors: index out of range");
    model.grad_datum(theta_now, i, g);
    if (!all_finite(g))
      throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1));
    state.anchor_sum += g - state.anchor_grads.row(i).transpose();
    state.anchor_grads.row(i) = g.transpose();
  }
}

/// Inclusion weights for preferential subsampling: index i enters the batch
/// independently with probability w_i, so w_i is its expected multiplicity.
struct WeightScheme {
  Vector weights;

  explicit WeightScheme(Vector w) : weights(std::move(w)) {
    for (Index i = 0; i < weights.size(); ++i) {
      if (!(weights[i] > 0.0) || weights[i] > 1.0)
        throw ArgumentError("WeightScheme: w[" + std::to_string(i + 1) +
                            "] outside (0, 1]");
    }
  }

  static WeightScheme uniform(Index population, Index n) {
    if (n < 1 || n > population) throw ArgumentError("WeightScheme: n outside [1, N]");
    return WeightScheme(Vector::Constant(population,
                                         static_cast<double>(n) / static_cast<double>(population)));
  }

  double expected_size() const { return weights.sum(); }
};

/// sum_{i in S} grad U_i(theta) / w_i with independent inclusions.
inline GradientEstimate estimate_weighted(const PotentialModel& model, const Vector& theta,
                                          const WeightScheme& scheme, RngStream& rng) {
  if (scheme.weights.size() != model.data_count())
    throw ArgumentError("estimate_weighted: weight vector length != N");
  GradientEstimate est;
  est.tag = EstimatorTag::weighted;
  est.vector = Vector::Zero(model.dim());
  est.batch.population = model.data_count();
  Vector g(model.dim());
  for (Index i = 0; i < model.data_count(); ++i) {
    if (rng.uniform01() < scheme.weights[i]) {
      model.grad_datum(theta, i, g);
      if (!all_finite(g))
        throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1));
      est.vector += g / scheme.weights[i];
      est.batch.indices.push_back(i);
    }
  }
  return est;
}

/// A stochastic gradient source: writes an estimate at theta into `out`,
/// consuming the stream. All samplers run against this signature.
using GradientOracle = std::function<void(const Vector&, RngStream&, GradientEstimate&)>;

inline GradientOracle make_full_oracle(const PotentialModel& model) {
  return [&model](const Vector& theta, RngStream&, GradientEstimate& out) {
    out = estimate_full(model, theta);
  };
}

inline GradientOracle make_simple_oracle(const PotentialModel& model, Index n) {
  return [&model, n](const Vector& theta, RngStream& rng, GradientEstimate& out) {
    out = estimate_simple(model, theta, sample_minibatch(model.data_count(), n, rng));
  };
}

/// Control-variate oracle. With `refresh` the touched anchor rows are
/// re-centred at every draw. `simple_switch_radius`, when set, falls back to
/// the simple estimator whenever ||theta - anchor|| exceeds it.
inline GradientOracle make_cv_oracle(const PotentialModel& model, ControlVariateState& state,
                                     Index n, bool refresh = false,
                                     std::optional<double> simple_switch_radius = std::nullopt) {
  return [&model, &state, n, refresh, simple_switch_radius](
             const Vector& theta, RngStream& rng, GradientEstimate& out) {
    MiniBatch batch = sample_minibatch(model.data_count(), n, rng);
    if (simple_switch_radius && (theta - state.anchor).norm() > *simple_switch_radius) {
      out = estimate_simple(model, theta, std::move(batch));
      return;
    }
    out = estimate_cv(model, state, theta, batch);
    if (refresh) cv_refresh_anchors(state, batch, theta, model);
  };
}

/// Adds centred Gaussian noise with covariance tau2 * I to a base oracle.
inline GradientOracle make_noisy_oracle(GradientOracle base, double tau2) {
  if (tau2 < 0.0) throw ArgumentError("make_noisy_oracle: tau2 must be >= 0");
  const double tau = std::sqrt(tau2);
  return [base = std::move(base), tau](const Vector& theta, RngStream& rng,
                                       GradientEstimate& out) {
    base(theta, rng, out);
    if (tau > 0.0) {
      for (Index i = 0; i < out.vector.size(); ++i) out.vector[i] += tau * rng.normal();
    }
  };
}

/// Empirical covariance of an estimator at fixed theta over independent
/// replicate draws. Symmetric PSD up to sampling noise by construction.
inline Matrix variance_probe(const GradientOracle& oracle, const Vector& theta,
                             Index replicates, RngStream& rng) {
  if (replicates < 2) throw ArgumentError("variance_probe: need at least 2 replicates");
  const Index d = theta.size();
  Matrix draws(replicates, d);
  GradientEstimate est;
  for (Index r = 0; r < replicates; ++r) {
    oracle(theta, rng, est);
    draws.row(r) = est.vector.transpose();
  }
  const Vector mean = draws.colwise().mean().transpose();
  Matrix centered = draws.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(replicates - 1);
}

}  // namespace sgmcmc

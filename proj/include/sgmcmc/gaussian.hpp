#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include "sgmcmc/core.hpp"
#include "sgmcmc/model.hpp"
#include "sgmcmc/samplers.hpp"

namespace sgmcmc {

/// Zero-mean Gaussian target with covariance P^T diag(variances) P for an
/// orthogonal rotation P and variances sigma_1^2 >= ... >= sigma_d^2 > 0.
/// Everything about overdamped Langevin on this target is closed-form, which
/// is what makes it the calibration bench for the samplers.
struct GaussianTarget {
  Matrix rotation;   // P
  Vector variances;  // diagonal of the rotated covariance

  GaussianTarget(Matrix p, Vector vars) : rotation(std::move(p)), variances(std::move(vars)) {
    const Index d = variances.size();
    if (rotation.rows() != d || rotation.cols() != d)
      throw ArgumentError("GaussianTarget: rotation must be d x d");
    if ((rotation.transpose() * rotation - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-12)
      throw ArgumentError("GaussianTarget: rotation is not orthogonal");
    for (Index j = 0; j < d; ++j) {
      if (!(variances[j] > 0.0)) throw ArgumentError("GaussianTarget: variances must be positive");
      if (j > 0 && variances[j] > variances[j - 1] + 1e-15)
        throw ArgumentError("GaussianTarget: variances must be non-increasing");
    }
  }

  Index dim() const { return variances.size(); }
  double min_variance() const { return variances[dim() - 1]; }

  Matrix covariance() const {
    return rotation.transpose() * variances.asDiagonal() * rotation;
  }
  Matrix precision() const {
    return rotation.transpose() * variances.cwiseInverse().asDiagonal() * rotation;
  }

  static GaussianTarget standard(Index d) {
    return GaussianTarget(Matrix::Identity(d, d), Vector::Ones(d));
  }

  /// The 2-d bench target: variances (2, 1), rotation by pi/4.
  static GaussianTarget bench2d() {
    const double c = std::cos(M_PI / 4.0), s = std::sin(M_PI / 4.0);
    Matrix p(2, 2);
    p << c, s, -s, c;
    Vector v(2);
    v << 2.0, 1.0;
    return GaussianTarget(std::move(p), std::move(v));
  }
};

/// Isotropic gradient noise nu ~ N(0, tau2 * I).
struct NoiseSpec {
  double tau2 = 0.0;

  explicit NoiseSpec(double t2 = 0.0) : tau2(t2) {
    if (!(t2 >= 0.0) || !std::isfinite(t2)) throw ArgumentError("NoiseSpec: tau2 must be finite and >= 0");
  }
};

/// grad U(theta) = Sigma^{-1} theta for U = theta' Sigma^{-1} theta / 2,
/// plus injected noise nu ~ N(0, tau2 I).
inline Vector gaussian_grad(const GaussianTarget& target, const Vector& theta,
                            const NoiseSpec& noise, RngStream& rng) {
  if (theta.size() != target.dim()) throw ArgumentError("gaussian_grad: theta length mismatch");
  Vector g = target.rotation.transpose() *
             (target.variances.cwiseInverse().asDiagonal() * (target.rotation * theta));
  if (noise.tau2 > 0.0) {
    const double tau = std::sqrt(noise.tau2);
    for (Index i = 0; i < g.size(); ++i) g[i] += tau * rng.normal();
  }
  return g;
}

struct StationaryVariance {
  Vector per_component;   // sigma_j^2 (1 + h V_jj) / (1 - h / (4 sigma_j^2))
  Vector pre_expansion;   // (h^2 V_jj + h) / (1 - (1 - lambda_j)^2)
};

/// Closed-form stationary variance of the Langevin recursion on this target,
/// per rotated component, for step size h and gradient-noise variance V_jj
/// (rotated coordinates). Requires h < 4 sigma_d^2; beyond that no
/// stationary distribution exists.
inline StationaryVariance stationary_variance(const GaussianTarget& target, double h,
                                              const Vector& v_diag_rotated) {
  if (!(h > 0.0)) throw ArgumentError("stationary_variance: h must be positive");
  if (v_diag_rotated.size() != target.dim())
    throw ArgumentError("stationary_variance: V diagonal has wrong length");
  if (v_diag_rotated.minCoeff() < 0.0)
    throw ArgumentError("stationary_variance: V entries must be >= 0");
  if (h >= 4.0 * target.min_variance())
    throw ArgumentError("stationary_variance: no stationary distribution for h >= 4*sigma_d^2 (h=" +
                        std::to_string(h) + ")");
  const Index d = target.dim();
  StationaryVariance out;
  out.per_component.resize(d);
  out.pre_expansion.resize(d);
  for (Index j = 0; j < d; ++j) {
    const double s2 = target.variances[j];
    const double lambda = h / (2.0 * s2);
    out.per_component[j] = s2 * (1.0 + h * v_diag_rotated[j]) / (1.0 - h / (4.0 * s2));
    out.pre_expansion[j] =
        (h * h * v_diag_rotated[j] + h) / (1.0 - (1.0 - lambda) * (1.0 - lambda));
  }
  return out;
}

struct GaussianSimOptions {
  Index burn_in = 0;
  Index stride = 1;
  bool record_trace = false;
  double guard = kDivergenceGuard;
};

/// Moments are accumulated over every post-burn-in iteration in rotated
/// coordinates; the trace (when recorded) is thinned like the sampler traces.
struct GaussianRunStats {
  Index steps = 0;
  Index accumulated = 0;
  std::optional<Index> diverged_at;
  bool stability_warning = false;  // h >= 4*sigma_d^2
  Vector rotated_mean;
  Vector rotated_variance;
  double max_abs_rotated = 0.0;
  Trace trace;
};

namespace detail {

/// Langevin recursion in rotated coordinates,
///   x_{k+1} = (I - (h/2) Lambda^{-1}) x_k + h P nu_k + sqrt(h) c_z P z_k,
/// shared by the plain and variance-corrected simulators. c_z scales the
/// driving noise (1 normally, sqrt(1 - h tau2) under correction). The trace
/// records theta = P^T x and, as the gradient estimate at theta_k, the value
/// Sigma^{-1} theta_k - 2 nu_k: the recursion's h*nu_k noise term is what a
/// half-step update -(h/2)*ghat produces when ghat errs by -2 nu_k.
inline GaussianRunStats gaussian_recursion(const GaussianTarget& target, double h,
                                           const NoiseSpec& noise, Index iterations,
                                           const Vector& theta0, double z_scale, RngStream& rng,
                                           const GaussianSimOptions& opts) {
  if (iterations < 1) throw ArgumentError("ar_simulate: need at least one iteration");
  const Index d = target.dim();
  if (theta0.size() != d) throw ArgumentError("ar_simulate: theta0 length mismatch");
  if (opts.burn_in < 0 || opts.burn_in >= iterations)
    throw ArgumentError("ar_simulate: burn-in must lie in [0, iterations)");

  GaussianRunStats stats;
  stats.stability_warning = h >= 4.0 * target.min_variance();
  const Vector decay = Vector::Ones(d) - (h / 2.0) * target.variances.cwiseInverse();
  const double tau = std::sqrt(noise.tau2);
  const double sqrt_h = std::sqrt(h);
  const Matrix& p = target.rotation;
  const Matrix pt = p.transpose();
  const Vector inv_var = target.variances.cwiseInverse();

  Vector x = p * theta0;
  Vector nu(d), z(d), mean = Vector::Zero(d), m2 = Vector::Zero(d);
  const Index capacity = opts.record_trace ? (iterations - opts.burn_in) / opts.stride : 0;
  TraceBuilder builder(capacity, d);

  for (Index k = 0; k < iterations; ++k) {
    stats.max_abs_rotated = std::max(stats.max_abs_rotated, x.cwiseAbs().maxCoeff());
    if (!all_finite(x) || x.cwiseAbs().maxCoeff() > opts.guard) {
      stats.diverged_at = k;
      break;
    }
    if (k >= opts.burn_in) {
      // Welford, per rotated component.
      ++stats.accumulated;
      const Vector delta = x - mean;
      mean += delta / static_cast<double>(stats.accumulated);
      m2 += delta.cwiseProduct(x - mean);
    }
    if (tau > 0.0) {
      rng.normal_vec(nu);
      nu *= tau;
    } else {
      nu.setZero();
    }
    if (opts.record_trace && k >= opts.burn_in && (k - opts.burn_in + 1) % opts.stride == 0) {
      const Vector theta = pt * x;
      const Vector grad_est = pt * (inv_var.asDiagonal() * x) - 2.0 * nu;
      builder.push(theta, grad_est, k);
    }
    rng.normal_vec(z);
    x = decay.cwiseProduct(x) + h * (p * nu) + (sqrt_h * z_scale) * (p * z);
    ++stats.steps;
  }
  stats.rotated_mean = mean;
  stats.rotated_variance =
      stats.accumulated > 1 ? Vector(m2 / static_cast<double>(stats.accumulated - 1))
                            : Vector(Vector::Zero(d));
  stats.trace = builder.finish();
  return stats;
}

}  // namespace detail

/// Exact simulation of the Langevin recursion on the Gaussian target. A step
/// size at or beyond 4*sigma_d^2 is allowed but flagged, and the divergence
/// guard ends the run with the blow-up iteration recorded.
inline GaussianRunStats ar_simulate(const GaussianTarget& target, double h, const NoiseSpec& noise,
                                    Index iterations, const Vector& theta0, RngStream& rng,
                                    const GaussianSimOptions& opts = {}) {
  if (!(h > 0.0)) throw ArgumentError("ar_simulate: h must be positive");
  return detail::gaussian_recursion(target, h, noise, iterations, theta0, 1.0, rng, opts);
}

/// Variance-corrected simulation: the driving noise is shrunk to covariance
/// h (1 - h tau2) I so the combined per-step noise has covariance h I, which
/// removes the gradient-noise inflation from the stationary variance.
/// Requires h * tau2 < 1.
inline GaussianRunStats corrected_simulate(const GaussianTarget& target, double h,
                                           const NoiseSpec& noise, Index iterations,
                                           RngStream& rng, const GaussianSimOptions& opts = {}) {
  if (!(h > 0.0)) throw ArgumentError("corrected_simulate: h must be positive");
  const double shrink = 1.0 - h * noise.tau2;
  if (shrink <= 0.0)
    throw CorrectionInfeasibleError(
        "corrected_simulate: h * tau2 = " + std::to_string(h * noise.tau2) +
            " >= 1, the driving noise cannot absorb the gradient noise",
        shrink);
  return detail::gaussian_recursion(target, h, noise, iterations, Vector::Zero(target.dim()),
                                    std::sqrt(shrink), rng, opts);
}

/// The Gaussian target as a single-datum potential, U_1 = theta' Sigma^{-1}
/// theta / 2. Lets the generic samplers and estimators run on the bench.
class GaussianPotential final : public PotentialModel {
 public:
  explicit GaussianPotential(GaussianTarget target)
      : target_(std::move(target)), precision_(target_.precision()) {}

  Index dim() const override { return target_.dim(); }
  Index data_count() const override { return 1; }

  void grad_datum(const Vector& theta, Index i, Eigen::Ref<Vector> out) const override {
    if (i != 0) throw ArgumentError("GaussianPotential: datum index out of range");
    out.noalias() = precision_ * theta;
  }

  double potential_datum(const Vector& theta, Index i) const override {
    if (i != 0) throw ArgumentError("GaussianPotential: datum index out of range");
    return 0.5 * theta.dot(precision_ * theta);
  }
  bool has_potential() const override { return true; }

  std::optional<ConvexityConstants> convexity() const override {
    ConvexityConstants c;
    c.m = 1.0 / target_.variances[0];
    c.M = 1.0 / target_.min_variance();
    return c;
  }

  const GaussianTarget& target() const { return target_; }

 private:
  GaussianTarget target_;
  Matrix precision_;
};

}  // namespace sgmcmc

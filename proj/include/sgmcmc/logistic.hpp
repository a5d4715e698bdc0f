#pragma once

#include <cmath>
#include <optional>
#include <utility>

#include "sgmcmc/core.hpp"
#include "sgmcmc/data.hpp"
#include "sgmcmc/model.hpp"
#include "sgmcmc/samplers.hpp"

namespace sgmcmc {

namespace detail {

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

/// Bayesian logistic regression: binary labels y, design matrix X, zero-mean
/// Gaussian prior with covariance prior_var * I (default 10 I). The prior is
/// folded into every per-datum term with weight 1/N, so
///   grad U_i = -(y_i - p_i) x_i + theta / (N * prior_var),
///   p_i = sigmoid(theta' x_i).
class LogisticModel final : public PotentialModel {
 public:
  LogisticModel(Matrix x, Vector y, double prior_var = 10.0)
      : x_(std::move(x)), y_(std::move(y)), prior_var_(prior_var) {
    if (x_.rows() != y_.size()) throw ArgumentError("LogisticModel: X rows != label count");
    if (x_.rows() < 1 || x_.cols() < 1) throw ArgumentError("LogisticModel: empty design matrix");
    if (!(prior_var_ > 0.0)) throw ArgumentError("LogisticModel: prior variance must be positive");
    for (Index i = 0; i < y_.size(); ++i) {
      if (y_[i] != 0.0 && y_[i] != 1.0)
        throw ArgumentError("LogisticModel: labels must be 0/1 (row " + std::to_string(i + 1) +
                            ")");
    }
  }

  static LogisticModel from_dataset(const DataSet& data, double prior_var = 10.0) {
    return LogisticModel(data.features, data.labels, prior_var);
  }

  Index dim() const override { return x_.cols(); }
  Index data_count() const override { return x_.rows(); }
  const Matrix& design() const { return x_; }
  const Vector& labels() const { return y_; }
  double prior_variance() const { return prior_var_; }

  void grad_datum(const Vector& theta, Index i, Eigen::Ref<Vector> out) const override {
    if (i < 0 || i >= data_count())
      throw ArgumentError("LogisticModel: datum index " + std::to_string(i + 1) +
                          " out of range");
    const double p = detail::sigmoid(x_.row(i).dot(theta));
    out = (p - y_[i]) * x_.row(i).transpose() +
          theta / (static_cast<double>(data_count()) * prior_var_);
  }

  double potential_datum(const Vector& theta, Index i) const override {
    if (i < 0 || i >= data_count())
      throw ArgumentError("LogisticModel: datum index " + std::to_string(i + 1) +
                          " out of range");
    const double t = x_.row(i).dot(theta);
    // -log f(y|theta) = softplus(t) - y*t, stable for |t| up to ~700.
    const double nll = detail::softplus(t) - y_[i] * t;
    return nll + theta.squaredNorm() / (2.0 * static_cast<double>(data_count()) * prior_var_);
  }
  bool has_potential() const override { return true; }

  void grad_sum(const Vector& theta, std::span<const Index> indices,
                Eigen::Ref<Vector> out) const override {
    out.setZero();
    for (const Index i : indices) {
      const double p = detail::sigmoid(x_.row(i).dot(theta));
      out += (p - y_[i]) * x_.row(i).transpose();
    }
    out += (static_cast<double>(indices.size()) / static_cast<double>(data_count())) * theta /
           prior_var_;
    if (!all_finite(out)) locate_bad_datum(theta, indices);
  }

  void grad_full(const Vector& theta, Eigen::Ref<Vector> out) const override {
    const Vector logits = x_ * theta;
    const Vector residual = (1.0 / (1.0 + (-logits.array()).exp())).matrix() - y_;
    out.noalias() = x_.transpose() * residual;
    out += theta / prior_var_;
    if (!all_finite(out)) {
      std::vector<Index> all(static_cast<std::size_t>(data_count()));
      for (Index i = 0; i < data_count(); ++i) all[static_cast<std::size_t>(i)] = i;
      locate_bad_datum(theta, all);
    }
  }

  std::optional<ConvexityConstants> convexity() const override {
    ConvexityConstants c;
    c.m = 1.0 / prior_var_;
    c.M = 0.25 * x_.squaredNorm() + 1.0 / prior_var_;
    return c;
  }

 private:
  [[noreturn]] void locate_bad_datum(const Vector& theta, std::span<const Index> indices) const {
    Vector g(dim());
    for (const Index i : indices) {
      grad_datum(theta, i, g);
      if (!all_finite(g))
        throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1));
    }
    throw DivergenceError("non-finite gradient sum");
  }

  Matrix x_;
  Vector y_;
  double prior_var_;
};

inline ConvexityConstants convexity_constants(const LogisticModel& model) {
  return *model.convexity();
}

/// Synthetic instance: features x_i ~ N(0, Sigma_x) with the lag-decaying
/// covariance Sigma_x(i,j) = rho^|i-j| (generated as an order-1 autoregression
/// across coordinates, PSD by construction), labels Bernoulli under
/// theta_true. Returned in the generic DataSet schema.
inline DataSet simulate_logreg(Index n, Index d, double rho, const Vector& theta_true,
                               RngStream& rng) {
  if (n < 1 || d < 1) throw ArgumentError("simulate_logreg: N and d must be >= 1");
  if (!(rho >= 0.0 && rho < 1.0)) throw ArgumentError("simulate_logreg: rho must lie in [0,1)");
  if (theta_true.size() != d) throw ArgumentError("simulate_logreg: theta_true length mismatch");

  DataSet data;
  data.features.resize(n, d);
  data.labels.resize(n);
  data.label_kind = LabelKind::binary;
  data.label_name = "y";
  data.feature_names.resize(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j)
    data.feature_names[static_cast<std::size_t>(j)] = "x" + std::to_string(j + 1);

  const double innovation = std::sqrt(1.0 - rho * rho);
  for (Index i = 0; i < n; ++i) {
    double prev = rng.normal();
    data.features(i, 0) = prev;
    for (Index j = 1; j < d; ++j) {
      prev = rho * prev + innovation * rng.normal();
      data.features(i, j) = prev;
    }
    const double p = detail::sigmoid(data.features.row(i).dot(theta_true));
    data.labels[i] = rng.uniform01() < p ? 1.0 : 0.0;
  }
  return data;
}

/// Posterior-predictive probability of label 1 at x_star: the per-sample
/// sigmoid averaged over the stored trace.
inline double predict_prob(const Trace& trace, const Vector& x_star) {
  if (trace.stored() < 1) throw ArgumentError("predict_prob: empty trace");
  if (x_star.size() != trace.dim()) throw ArgumentError("predict_prob: feature length mismatch");
  double acc = 0.0;
  for (Index k = 0; k < trace.stored(); ++k) {
    acc += detail::sigmoid(trace.states.row(k).dot(x_star));
  }
  return acc / static_cast<double>(trace.stored());
}

}  // namespace sgmcmc

#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sgmcmc/core.hpp"
#include "sgmcmc/samplers.hpp"

namespace sgmcmc {

inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SGMCMC_WORKERS")) {
    const int parsed = std::atoi(env);
    if (parsed > 0) return parsed;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Inverse multi-quadratic kernel k(x,y) = (c^2 + ||x-y||^2)^beta with the
/// convergence-detecting ranges c > 0, beta in (-1, 0).
///
/// score_convention: the Stein kernel is evaluated with scores
/// s = -grad U (the choice under which its expectation vanishes at the
/// target). paper_literal flips the scores to +grad U, which negates the
/// cross terms; it is kept for comparability, not for diagnostics.
struct KsdConfig {
  double c = 1.0;
  double beta = -0.5;
  enum class ScoreConvention { negative_grad, paper_literal };
  ScoreConvention convention = ScoreConvention::negative_grad;

  KsdConfig(double c_, double beta_,
            ScoreConvention conv = ScoreConvention::negative_grad)
      : c(c_), beta(beta_), convention(conv) {
    if (!(c > 0.0)) throw ArgumentError("KsdConfig: c must be positive");
    if (!(beta > -1.0 && beta < 0.0)) throw ArgumentError("KsdConfig: beta must lie in (-1, 0)");
  }
  KsdConfig() = default;
};

struct ImqTerms {
  double k = 0.0;
  Vector grad_x;  // dk/dx_j
  Vector grad_y;  // dk/dy_j
  Vector cross;   // d2k/dx_j dy_j
};

inline ImqTerms imq_kernel_terms(const Vector& x, const Vector& y, double c, double beta) {
  if (!(c > 0.0)) throw ArgumentError("imq_kernel_terms: c must be positive");
  if (!(beta > -1.0 && beta < 0.0))
    throw ArgumentError("imq_kernel_terms: beta must lie in (-1, 0)");
  if (x.size() != y.size()) throw ArgumentError("imq_kernel_terms: dimension mismatch");
  const Vector diff = x - y;
  const double base = c * c + diff.squaredNorm();
  const double p0 = std::pow(base, beta);
  const double p1 = std::pow(base, beta - 1.0);
  const double p2 = std::pow(base, beta - 2.0);
  ImqTerms t;
  t.k = p0;
  t.grad_x = 2.0 * beta * p1 * diff;
  t.grad_y = -t.grad_x;
  t.cross = (-2.0 * beta * p1) * Vector::Ones(x.size()) -
            (4.0 * beta * (beta - 1.0) * p2) * diff.cwiseProduct(diff);
  return t;
}

/// Coordinate-j Stein kernel
///   k0_j = s_x[j] s_y[j] k + s_x[j] dk/dy_j + s_y[j] dk/dx_j + d2k/dx_j dy_j
/// for given scores; symmetric in its two points.
inline double stein_kernel(const Vector& x, const Vector& y, const Vector& score_x,
                           const Vector& score_y, Index j, const KsdConfig& cfg) {
  const ImqTerms t = imq_kernel_terms(x, y, cfg.c, cfg.beta);
  return score_x[j] * score_y[j] * t.k + score_x[j] * t.grad_y[j] + score_y[j] * t.grad_x[j] +
         t.cross[j];
}

namespace detail {

// Per-pair Stein terms accumulated into acc[j], sharing the kernel powers
// across coordinates.
inline void accumulate_stein_pair(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y,
                                  const Eigen::RowVectorXd& sx, const Eigen::RowVectorXd& sy,
                                  double c2, double beta, double weight, Vector& acc) {
  const Eigen::RowVectorXd diff = x - y;
  const double base = c2 + diff.squaredNorm();
  double p1, p2;
  if (beta == -0.5) {
    const double inv = 1.0 / base;
    p1 = inv / std::sqrt(base);  // base^(-3/2)
    p2 = p1 * inv;
  } else {
    p1 = std::pow(base, beta - 1.0);
    p2 = std::pow(base, beta - 2.0);
  }
  const double k = p1 * base;
  const double a1 = 2.0 * beta * p1;
  const double c0 = -2.0 * beta * p1;
  const double c1 = -4.0 * beta * (beta - 1.0) * p2;
  for (Index j = 0; j < acc.size(); ++j) {
    const double dkdx = a1 * diff[j];
    acc[j] += weight * (sx[j] * sy[j] * k - sx[j] * dkdx + sy[j] * dkdx + c0 +
                        c1 * diff[j] * diff[j]);
  }
}

}  // namespace detail

/// Kernel Stein discrepancy of a sample against the target whose potential
/// gradients (or unbiased estimates of them) are supplied per row:
///   KSD = sum_j sqrt( sum_{k,k'} k0_j(x_k, x_k') / K^2 ).
/// The pair sums are partitioned into fixed-size row tiles; tiles may be
/// computed by several workers but are reduced in index order, so the result
/// is byte-stable across worker counts and matches the naive double loop to
/// floating-point accumulation error. Cost is O(K^2 d).
inline double ksd(const Matrix& points, const Matrix& grad_estimates, const KsdConfig& cfg = {},
                  int workers = 0) {
  const Index K = points.rows();
  const Index d = points.cols();
  if (K < 1) throw ArgumentError("ksd: empty sample");
  if (grad_estimates.rows() != K || grad_estimates.cols() != d)
    throw ArgumentError("ksd: gradient rows do not match the sample");

  const double sign = cfg.convention == KsdConfig::ScoreConvention::negative_grad ? -1.0 : 1.0;
  const Matrix scores = sign * grad_estimates;
  const double c2 = cfg.c * cfg.c;

  constexpr Index kTileRows = 64;
  const Index n_tiles = (K + kTileRows - 1) / kTileRows;
  std::vector<Vector> partials(static_cast<std::size_t>(n_tiles), Vector::Zero(d));

  const auto run_tile = [&](Index tile) {
    const Index row0 = tile * kTileRows;
    const Index row1 = std::min(K, row0 + kTileRows);
    Vector acc = Vector::Zero(d);
    for (Index a = row0; a < row1; ++a) {
      detail::accumulate_stein_pair(points.row(a), points.row(a), scores.row(a), scores.row(a),
                                    c2, cfg.beta, 1.0, acc);
      for (Index b = a + 1; b < K; ++b) {
        detail::accumulate_stein_pair(points.row(a), points.row(b), scores.row(a), scores.row(b),
                                      c2, cfg.beta, 2.0, acc);
      }
    }
    partials[static_cast<std::size_t>(tile)] = std::move(acc);
  };

  const int n_workers = std::min<int>(resolve_workers(workers), static_cast<int>(n_tiles));
  if (n_workers <= 1) {
    for (Index t = 0; t < n_tiles; ++t) run_tile(t);
  } else {
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        for (Index t = next.fetch_add(1); t < n_tiles; t = next.fetch_add(1)) run_tile(t);
      });
    }
    for (auto& th : pool) th.join();
  }

  Vector sums = Vector::Zero(d);
  for (const Vector& p : partials) sums += p;  // fixed tile order

  const double kk = static_cast<double>(K);
  double out = 0.0;
  for (Index j = 0; j < d; ++j) out += std::sqrt(std::max(sums[j], 0.0)) / kk;
  return out;
}

struct EssResult {
  double value = 0.0;
  bool degenerate = false;  // constant input; value reported as 0
};

/// Effective sample size K / (1 + 2 sum_t rho_t) with the autocovariance sum
/// truncated by the initial-positive-sequence rule on consecutive lag pairs.
inline EssResult ess(const Eigen::Ref<const Vector>& x) {
  const Index K = x.size();
  if (K < 10) throw ArgumentError("ess: need at least 10 samples");
  const double mean = x.mean();
  const auto gamma_at = [&](Index t) {
    double acc = 0.0;
    for (Index i = 0; i + t < K; ++i) acc += (x[i] - mean) * (x[i + t] - mean);
    return acc / static_cast<double>(K);
  };
  const double gamma0 = gamma_at(0);
  if (gamma0 <= 0.0 || !std::isfinite(gamma0)) return {0.0, true};

  double sigma2 = -gamma0;
  for (Index m = 0; 2 * m + 1 < K; ++m) {
    const double pair = gamma_at(2 * m) + gamma_at(2 * m + 1);
    if (pair <= 0.0) break;
    sigma2 += 2.0 * pair;
  }
  if (sigma2 <= 0.0) sigma2 = gamma0;
  return {static_cast<double>(K) * gamma0 / sigma2, false};
}

inline Vector ess_per_dim(const Matrix& states) {
  Vector out(states.cols());
  for (Index j = 0; j < states.cols(); ++j) out[j] = ess(states.col(j)).value;
  return out;
}

inline double min_ess(const Matrix& states) { return ess_per_dim(states).minCoeff(); }

/// Binary log-loss from posterior-predictive probabilities. Probabilities
/// are clipped to [1e-12, 1 - 1e-12] before the logs.
inline double log_loss_binary(const Vector& p_bar, const Vector& labels) {
  if (p_bar.size() != labels.size()) throw ArgumentError("log_loss_binary: length mismatch");
  if (p_bar.size() < 1) throw ArgumentError("log_loss_binary: empty test set");
  double acc = 0.0;
  for (Index i = 0; i < p_bar.size(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0)
      throw ArgumentError("log_loss_binary: labels must be 0/1");
    const double p = std::min(1.0 - 1e-12, std::max(1e-12, p_bar[i]));
    acc += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log1p(-p);
  }
  return -acc / static_cast<double>(p_bar.size());
}

/// Held-out binary log-loss of a trace under the logit link: per-sample
/// probabilities averaged over the stored states, then scored.
inline double log_loss_binary(const Trace& trace, const Matrix& test_x, const Vector& test_y) {
  if (trace.stored() < 1) throw ArgumentError("log_loss_binary: empty trace");
  if (test_x.rows() != test_y.size()) throw ArgumentError("log_loss_binary: test set mismatch");
  if (test_x.cols() != trace.dim()) throw ArgumentError("log_loss_binary: feature width mismatch");
  Vector p_bar(test_x.rows());
  for (Index t = 0; t < test_x.rows(); ++t) {
    const Vector logits = trace.states * test_x.row(t).transpose();
    p_bar[t] = (1.0 / (1.0 + (-logits.array()).exp())).mean();
  }
  return log_loss_binary(p_bar, test_y);
}

/// Multi-class log-loss: rows of `probabilities` are per-point class
/// distributions (must sum to 1 within 1e-9), labels are class ids.
inline double log_loss_multiclass(const Matrix& probabilities, const std::vector<Index>& labels) {
  const Index n = probabilities.rows();
  if (n < 1) throw ArgumentError("log_loss_multiclass: empty test set");
  if (static_cast<Index>(labels.size()) != n)
    throw ArgumentError("log_loss_multiclass: label count mismatch");
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (std::abs(probabilities.row(i).sum() - 1.0) > 1e-9)
      throw ArgumentError("log_loss_multiclass: row " + std::to_string(i + 1) +
                          " does not sum to 1");
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probabilities.cols())
      throw ArgumentError("log_loss_multiclass: label out of range at row " +
                          std::to_string(i + 1));
    acc += std::log(probabilities(i, y));
  }
  return -acc / static_cast<double>(n);
}

inline double rmse(const Vector& predictions, const Vector& truths) {
  if (predictions.size() != truths.size()) throw ArgumentError("rmse: length mismatch");
  if (predictions.size() < 1) throw ArgumentError("rmse: empty input");
  return std::sqrt((predictions - truths).squaredNorm() /
                   static_cast<double>(predictions.size()));
}

/// Metrics for one run, serialised to diagnostics.json by the runner.
struct DiagnosticsReport {
  std::optional<double> ksd;
  Vector ess_per_dim;
  double min_ess = 0.0;
  bool ess_degenerate = false;
  std::optional<double> log_loss;
  std::optional<double> rmse;
  double wall_clock_sec = 0.0;
};

}  // namespace sgmcmc

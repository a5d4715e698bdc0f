#pragma once

// Shared test utilities: finite-difference oracles and exhaustive subset
// enumeration, kept independent of the library's gradient/estimator paths.

#include <functional>
#include <vector>

#include "sgmcmc/core.hpp"
#include "sgmcmc/logistic.hpp"
#include "sgmcmc/model.hpp"

namespace test_helpers {

using sgmcmc::Index;
using sgmcmc::Matrix;
using sgmcmc::Vector;

// Central finite differences of the per-datum potential U_i.
inline Vector fd_grad_datum(const sgmcmc::PotentialModel& model, const Vector& theta, Index i,
                            double eps = 1e-5) {
  Vector g(theta.size());
  Vector tp = theta, tm = theta;
  for (Index j = 0; j < theta.size(); ++j) {
    tp[j] = theta[j] + eps;
    tm[j] = theta[j] - eps;
    g[j] = (model.potential_datum(tp, i) - model.potential_datum(tm, i)) / (2.0 * eps);
    tp[j] = theta[j];
    tm[j] = theta[j];
  }
  return g;
}

inline Vector fd_grad_full(const sgmcmc::PotentialModel& model, const Vector& theta,
                           double eps = 1e-5) {
  Vector g = Vector::Zero(theta.size());
  for (Index i = 0; i < model.data_count(); ++i) g += fd_grad_datum(model, theta, i, eps);
  return g;
}

inline double rel_err(const Vector& got, const Vector& want) {
  const double scale = std::max(1.0, want.norm());
  return (got - want).norm() / scale;
}

// All n-subsets of {0..N-1}, ascending within each subset.
inline std::vector<std::vector<Index>> all_subsets(Index population, Index n) {
  std::vector<std::vector<Index>> out;
  std::vector<Index> current;
  const std::function<void(Index)> rec = [&](Index start) {
    if (static_cast<Index>(current.size()) == n) {
      out.push_back(current);
      return;
    }
    for (Index i = start; i < population; ++i) {
      current.push_back(i);
      rec(i + 1);
      current.pop_back();
    }
  };
  rec(0);
  return out;
}

// Deterministic small logistic instance for oracle tests.
inline sgmcmc::LogisticModel small_logistic(Index n, Index d, std::uint64_t seed) {
  sgmcmc::RngStream rng(seed);
  Matrix x(n, d);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) x(i, j) = rng.normal();
    y[i] = rng.uniform01() < 0.5 ? 0.0 : 1.0;
  }
  return sgmcmc::LogisticModel(std::move(x), std::move(y));
}

}  // namespace test_helpers

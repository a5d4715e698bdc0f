#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgmcmc/core.hpp"

namespace sgmcmc {

/// Lower/upper curvature bounds (m, M) of a potential, when known.
/// step_ceiling() is the stability-motivated bound 1/(M+m) on step sizes.
struct ConvexityConstants {
  double m = 0.0;
  double M = 0.0;
  double step_ceiling() const { return 1.0 / (M + m); }
};

/// A subset of datum indices drawn without replacement from {0..N-1}.
/// Indices are kept sorted so downstream sums have a fixed order.
struct MiniBatch {
  std::vector<Index> indices;
  Index population = 0;

  Index size() const { return static_cast<Index>(indices.size()); }
};

/// Uniform n-subset of {0..N-1} via Floyd's algorithm. n == N returns the
/// identity batch without consuming the stream, so a full-batch run and a
/// subsampled run with n = N share one code path and one draw sequence.
inline MiniBatch sample_minibatch(Index population, Index n, RngStream& rng) {
  if (population < 1) throw ArgumentError("sample_minibatch: population must be >= 1");
  if (n < 1 || n > population)
    throw ArgumentError("sample_minibatch: subsample size " + std::to_string(n) +
                        " outside [1, " + std::to_string(population) + "]");
  MiniBatch batch;
  batch.population = population;
  batch.indices.reserve(static_cast<std::size_t>(n));
  if (n == population) {
    for (Index i = 0; i < population; ++i) batch.indices.push_back(i);
    return batch;
  }
  for (Index j = population - n; j < population; ++j) {
    const Index t = static_cast<Index>(rng.uniform_below(static_cast<std::uint64_t>(j + 1)));
    if (std::find(batch.indices.begin(), batch.indices.end(), t) == batch.indices.end()) {
      batch.indices.push_back(t);
    } else {
      batch.indices.push_back(j);
    }
  }
  std::sort(batch.indices.begin(), batch.indices.end());
  return batch;
}

/// A target distribution exp(-U) with U(theta) = sum_i U_i(theta). Models
/// expose per-datum gradients; the prior must already be folded into each
/// U_i with weight 1/N. Adding the prior on top of that double-counts it.
///
/// Immutable after construction; gradient calls are concurrency-safe.
class PotentialModel {
 public:
  virtual ~PotentialModel() = default;

  virtual Index dim() const = 0;
  virtual Index data_count() const = 0;

  /// grad of U_i at theta, written into out (size dim()).
  virtual void grad_datum(const Vector& theta, Index i, Eigen::Ref<Vector> out) const = 0;

  /// U_i(theta) up to an additive constant. Optional; guard with has_potential().
  virtual double potential_datum(const Vector& /*theta*/, Index /*i*/) const {
    throw ArgumentError("potential_datum: not provided by this model");
  }
  virtual bool has_potential() const { return false; }

  virtual std::optional<ConvexityConstants> convexity() const { return std::nullopt; }

  /// sum of grad U_i over the given indices. Models with a vectorised
  /// gradient should override this; the default loops grad_datum.
  virtual void grad_sum(const Vector& theta, std::span<const Index> indices,
                        Eigen::Ref<Vector> out) const {
    Vector g(dim());
    out.setZero();
    for (const Index i : indices) {
      grad_datum(theta, i, g);
      if (!all_finite(g)) {
        throw DivergenceError("non-finite gradient at datum " + std::to_string(i + 1));
      }
      out += g;
    }
  }

  virtual void grad_full(const Vector& theta, Eigen::Ref<Vector> out) const {
    std::vector<Index> all(static_cast<std::size_t>(data_count()));
    for (Index i = 0; i < data_count(); ++i) all[static_cast<std::size_t>(i)] = i;
    grad_sum(theta, all, out);
  }
};

inline Vector grad_full(const PotentialModel& model, const Vector& theta) {
  if (theta.size() != model.dim())
    throw ArgumentError("grad_full: theta has length " + std::to_string(theta.size()) +
                        ", model dimension is " + std::to_string(model.dim()));
  if (!all_finite(theta)) throw DivergenceError("grad_full: non-finite theta");
  Vector out(model.dim());
  model.grad_full(theta, out);
  return out;
}

}  // namespace sgmcmc

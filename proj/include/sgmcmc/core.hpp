#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace sgmcmc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = std::int64_t;

// Any state component beyond this magnitude aborts a run as divergent.
inline constexpr double kDivergenceGuard = 1e8;

class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, Index row, Index col)
      : std::runtime_error(msg + " (row " + std::to_string(row) + ", column " +
                           std::to_string(col) + ")"),
        row_(row),
        col_(col) {}
  explicit ParseError(const std::string& msg) : std::runtime_error(msg), row_(0), col_(0) {}
  Index row() const { return row_; }
  Index col() const { return col_; }

 private:
  Index row_;
  Index col_;
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

class OptimizationError : public std::runtime_error {
 public:
  explicit OptimizationError(const std::string& msg) : std::runtime_error(msg) {}
};

class CorrectionInfeasibleError : public std::runtime_error {
 public:
  explicit CorrectionInfeasibleError(const std::string& msg, double min_eigenvalue)
      : std::runtime_error(msg), min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

/// Seeded random stream owned by exactly one chain/worker. The generation
/// algorithms are fixed here (not delegated to std distributions) so a seed
/// pins the byte-exact draw sequence for a given build.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // Uniform on [0,1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                (std::numeric_limits<std::uint64_t>::max() % n);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  // Standard normal via Marsaglia polar, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  void normal_vec(Eigen::Ref<Vector> out) {
    for (Index i = 0; i < out.size(); ++i) out[i] = normal();
  }

  Vector normal_vec(Index n) {
    Vector out(n);
    normal_vec(out);
    return out;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sgmcmc

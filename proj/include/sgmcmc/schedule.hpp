#pragma once

#include <cmath>
#include <string>

#include "sgmcmc/core.hpp"

namespace sgmcmc {

/// Step-size schedule h_k. Either fixed at h0 or the polynomial decay
/// h_k = h0 * (k0 + k)^(-gamma), non-increasing for gamma in (0,1].
struct StepSchedule {
  enum class Kind { fixed, polynomial };

  Kind kind = Kind::fixed;
  double h0 = 0.0;
  double k0 = 1.0;
  double gamma = 1.0 / 3.0;

  // h0 = 0 is allowed for the fixed kind and freezes the dynamics.
  static StepSchedule fixed(double h0) {
    if (!(h0 >= 0.0)) throw ArgumentError("StepSchedule: h0 must be >= 0");
    StepSchedule s;
    s.kind = Kind::fixed;
    s.h0 = h0;
    return s;
  }

  static StepSchedule polynomial(double h0, double k0 = 1.0, double gamma = 1.0 / 3.0) {
    if (!(h0 > 0.0)) throw ArgumentError("StepSchedule: h0 must be positive");
    if (k0 < 0.0) throw ArgumentError("StepSchedule: k0 must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0))
      throw ArgumentError("StepSchedule: gamma must lie in (0,1]");
    StepSchedule s;
    s.kind = Kind::polynomial;
    s.h0 = h0;
    s.k0 = k0;
    s.gamma = gamma;
    return s;
  }

  double at(Index k) const {
    if (kind == Kind::fixed) return h0;
    return h0 * std::pow(k0 + static_cast<double>(k), -gamma);
  }
};

inline double step_at(const StepSchedule& schedule, Index k) { return schedule.at(k); }

}  // namespace sgmcmc

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sfm/core.hpp"

namespace sfm {

enum class PenaltyFamily { scad, mcp };

/// Folded-concave penalty p(x, gamma) on x >= 0.  `shape` is the SCAD a
/// (> 2, default 3.7) or the MCP b (> 0, default 3.5).
template <typename Scalar>
struct PenaltySpec {
  PenaltyFamily family = PenaltyFamily::scad;
  Scalar gamma = 0;
  Scalar shape = default_shape(PenaltyFamily::scad);

  static Scalar default_shape(PenaltyFamily f) {
    return f == PenaltyFamily::scad ? Scalar(3.7) : Scalar(3.5);
  }

  void validate() const {
    if (!(gamma >= Scalar(0)))
      throw std::invalid_argument("PenaltySpec: gamma must be >= 0");
    if (family == PenaltyFamily::scad && !(shape > Scalar(2)))
      throw std::invalid_argument("PenaltySpec: SCAD needs a > 2");
    if (family == PenaltyFamily::mcp && !(shape > Scalar(0)))
      throw std::invalid_argument("PenaltySpec: MCP needs b > 0");
  }
};

template <typename Scalar>
PenaltySpec<Scalar> make_scad(Scalar gamma, Scalar a = Scalar(3.7)) {
  PenaltySpec<Scalar> s{PenaltyFamily::scad, gamma, a};
  s.validate();
  return s;
}

template <typename Scalar>
PenaltySpec<Scalar> make_mcp(Scalar gamma, Scalar b = Scalar(3.5)) {
  PenaltySpec<Scalar> s{PenaltyFamily::mcp, gamma, b};
  s.validate();
  return s;
}

/// p(x, gamma); x must be non-negative.
template <typename Scalar>
Scalar penalty_value(const PenaltySpec<Scalar>& spec, Scalar x) {
  spec.validate();
  if (!(x >= Scalar(0)))
    throw std::invalid_argument("penalty_value: x must be >= 0");
  const Scalar g = spec.gamma;
  if (g == Scalar(0)) return Scalar(0);
  if (spec.family == PenaltyFamily::scad) {
    const Scalar a = spec.shape;
    if (x <= g) return g * x;
    if (x <= a * g)
      return (Scalar(2) * a * g * x - x * x - g * g) / (Scalar(2) * (a - Scalar(1)));
    return (a + Scalar(1)) * g * g / Scalar(2);
  }
  const Scalar b = spec.shape;
  if (x <= b * g) return g * x - x * x / (Scalar(2) * b);
  return b * g * g / Scalar(2);
}

/// q(x, gamma) = dp/dx on x >= 0 (right derivative at kinks; q(0) = gamma).
template <typename Scalar>
Scalar penalty_derivative(const PenaltySpec<Scalar>& spec, Scalar x) {
  spec.validate();
  if (!(x >= Scalar(0)))
    throw std::invalid_argument("penalty_derivative: x must be >= 0");
  const Scalar g = spec.gamma;
  if (g == Scalar(0)) return Scalar(0);
  if (spec.family == PenaltyFamily::scad) {
    const Scalar a = spec.shape;
    if (x <= g) return g;
    return std::max(a * g - x, Scalar(0)) / (a - Scalar(1));
  }
  const Scalar b = spec.shape;
  return std::max(b * g - x, Scalar(0)) / b;
}

/// Sum of p(|.|) over all coefficients of a matrix expression.
template <typename Scalar, typename Derived>
Scalar penalty_sum(const PenaltySpec<Scalar>& spec, const Eigen::MatrixBase<Derived>& mat) {
  Scalar total = 0;
  for (Index j = 0; j < mat.cols(); ++j)
    for (Index i = 0; i < mat.rows(); ++i)
      total += penalty_value(spec, Scalar(std::abs(mat(i, j))));
  return total;
}

/// Largest admissible prox step for this penalty (concavity bound).
template <typename Scalar>
Scalar prox_step_bound(const PenaltySpec<Scalar>& spec) {
  return spec.family == PenaltyFamily::scad ? spec.shape - Scalar(1) : spec.shape;
}

/// argmin_u  (u - z)^2 / (2 step) + p(|u|, gamma).
///
/// Solved exactly: the objective is strictly convex on each polynomial piece
/// whenever step stays below the concavity bound (a - 1 for SCAD, b for MCP),
/// so the minimizer is 0, a per-piece stationary point clamped to its piece,
/// or z beyond the flat region.  Ties go to the smaller |u|, and
/// |z| <= step * gamma collapses to exactly 0.
template <typename Scalar>
Scalar prox(const PenaltySpec<Scalar>& spec, Scalar z, Scalar step) {
  spec.validate();
  if (!(step > Scalar(0))) throw std::invalid_argument("prox: step must be > 0");
  if (!(step < prox_step_bound(spec)))
    throw NumericalError("prox: step breaks well-posedness bound (needs step < a-1 for SCAD, step < b for MCP)");
  const Scalar g = spec.gamma;
  if (g == Scalar(0)) return z;

  const Scalar w = std::abs(z);
  const Scalar t = step;

  Scalar cand[4];
  int ncand = 0;
  cand[ncand++] = Scalar(0);
  if (spec.family == PenaltyFamily::scad) {
    const Scalar a = spec.shape;
    cand[ncand++] = std::clamp(w - t * g, Scalar(0), g);
    cand[ncand++] = std::clamp((w * (a - Scalar(1)) - t * a * g) / (a - Scalar(1) - t),
                               g, a * g);
    cand[ncand++] = std::max(w, a * g);
  } else {
    const Scalar b = spec.shape;
    cand[ncand++] = std::clamp(b * (w - t * g) / (b - t), Scalar(0), b * g);
    cand[ncand++] = std::max(w, b * g);
  }

  Scalar best = cand[0];
  Scalar best_f = (best - w) * (best - w) / (Scalar(2) * t) + penalty_value(spec, best);
  for (int i = 1; i < ncand; ++i) {
    const Scalar u = cand[i];
    const Scalar f = (u - w) * (u - w) / (Scalar(2) * t) + penalty_value(spec, u);
    if (f < best_f || (f == best_f && u < best)) {
      best_f = f;
      best = u;
    }
  }
  if (best == Scalar(0)) return Scalar(0);  // avoid signed zero
  return z < Scalar(0) ? -best : best;
}

}  // namespace sfm

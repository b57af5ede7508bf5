#pragma once

#include <stdexcept>
#include <string>

namespace sfm {

// Numerical failures (singular systems, non-convergence, invalid losses).
// Precondition violations throw std::invalid_argument instead.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when an iterative solver exhausts its iteration budget without
// meeting its stopping rule.  Carries the best iterate seen so callers can
// inspect or salvage it.
template <typename Params>
struct ConvergenceError : NumericalError {
  ConvergenceError(const std::string& msg, Params best_iterate)
      : NumericalError(msg), best(std::move(best_iterate)) {}
  Params best;
};

}  // namespace sfm

// Error types and convergence reporting shared across the library.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kgl {

struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidConfig : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NotPSD : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateGraph : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidBandwidth : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DegenerateBandwidth : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateMask : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Signals that a kernel is too close to singular for a direct inverse;
/// callers switch to a gradient or pseudo-inverse path.
struct SingularKernel : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepSizeTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Metric value that does not exist for the given inputs (e.g. average
/// precision of an edgeless ground truth). Reported, never coerced to 0.
struct UndefinedMetric : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivisionByZero : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Outcome of an iterative solve (conjugate gradients, projected gradient).
struct ConvergenceReport {
  bool converged = false;
  std::int64_t iterations = 0;
  double residual = 0.0;  // final residual or relative objective change

  std::string describe(const std::string& what) const {
    return what + (converged ? " converged" : " did NOT converge") + " after " +
           std::to_string(iterations) +
           " iterations, residual = " + std::to_string(residual);
  }
};

/// Thrown when an inner solve exhausts its iteration budget and the caller
/// cannot proceed; carries the report for diagnostics.
struct ConvergenceError : std::runtime_error {
  ConvergenceReport report;
  ConvergenceError(const std::string& what, ConvergenceReport r)
      : std::runtime_error(what + ": " + r.describe("inner solve")),
        report(r) {}
};

}  // namespace kgl

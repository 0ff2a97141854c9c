#pragma once

// Finite-difference audit of every differentiable operation in 64-bit.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace pdse {

struct GradientSuiteOptions {
  int instances = 100;
  std::uint64_t seed = 1;
  double h = 1e-5;
  double tol = 1e-4;
  std::vector<std::string> only;  // empty runs every check
};

struct OpCheckResult {
  std::string name;
  int instances = 0;
  int failures = 0;
  int resamples = 0;  // draws rejected for lying near a kink
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double seconds = 0.0;
  std::string first_failure;

  bool passed() const { return failures == 0 && instances > 0; }
};

/// Names of the registered checks, in run order.
std::vector<std::string> gradient_suite_checks();

/// Instances are drawn with every kink (ReLU at 0, bilinear sampling at
/// integer coordinates, smooth-L1 at |d| = beta, max-pool ties) at least a
/// margin away from the evaluation point; draws that violate it are redrawn.
std::vector<OpCheckResult> run_gradient_suite(const GradientSuiteOptions& options,
                                              const std::function<void(const OpCheckResult&)>& on_result = {});

/// Fixed-width table, one row per check.
std::string format_gradient_report(const std::vector<OpCheckResult>& results);

}  // namespace pdse

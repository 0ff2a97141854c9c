#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pdse/tensor.hpp"

namespace pdse {

struct GradCheckReport {
  bool passed = true;
  /// Largest relative error among elements where both gradients exceed the
  /// floor max(1e-8, noise / tol), noise = 16 eps max(|f(x+h)|, |f(x-h)|, 1) / h.
  /// Such elements pass when the relative error is at most tol.
  double max_rel_error = 0.0;
  /// Largest absolute error among the remaining elements, which pass when the
  /// absolute error is at most tol * floor.
  double max_abs_error = 0.0;
  std::int64_t elements_checked = 0;
  /// Tensor and flat index of the worst element.
  std::size_t worst_tensor = 0;
  std::int64_t worst_index = -1;

  void merge(const GradCheckReport& other);
};

/// Central differences (f(x+h) - f(x-h)) / 2h against the reverse-mode
/// gradient of f at x. Throws std::runtime_error if f is not deterministic.
GradCheckReport finite_diff_check(const std::function<Tensor64(const Tensor64&)>& f,
                                  const Tensor64& x, double h = 1e-5, double tol = 1e-4);

/// Same check over several leaf tensors that f reads directly. The leaves are
/// perturbed in place and restored; their requires_grad flag is forced on.
GradCheckReport finite_diff_check(const std::function<Tensor64()>& f, std::vector<Tensor64> wrt,
                                  double h = 1e-5, double tol = 1e-4);

}  // namespace pdse

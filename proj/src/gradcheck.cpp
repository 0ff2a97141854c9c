#include "pdse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pdse {

namespace {

constexpr double kMagnitudeFloor = 1e-8;
constexpr double kNoiseFactor = 16.0;

double eval_scalar(const std::function<Tensor64()>& f) {
  NoGradGuard guard;
  const auto out = f();
  if (out.numel() != 1) throw std::invalid_argument("gradient check needs a scalar function");
  return out.item();
}

}  // namespace

void GradCheckReport::merge(const GradCheckReport& other) {
  passed = passed && other.passed;
  max_abs_error = std::max(max_abs_error, other.max_abs_error);
  if (other.max_rel_error > max_rel_error) {
    max_rel_error = other.max_rel_error;
    worst_tensor = other.worst_tensor;
    worst_index = other.worst_index;
  }
  elements_checked += other.elements_checked;
}

GradCheckReport finite_diff_check(const std::function<Tensor64()>& f, std::vector<Tensor64> wrt,
                                  double h, double tol) {
  if (h <= 0.0 || tol <= 0.0) throw std::invalid_argument("h and tol must be positive");
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  const double base = eval_scalar(f);
  if (eval_scalar(f) != base) {
    throw std::runtime_error("gradient check: function is not deterministic");
  }

  f().backward();

  GradCheckReport report;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& t = wrt[ti];
    std::vector<double> analytic(static_cast<std::size_t>(t.numel()), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.mutable_data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = eval_scalar(f);
      values[i] = saved - h;
      const double minus = eval_scalar(f);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double abs_err = std::abs(a - numeric);
      // Rounding in f(x +- h) limits the difference quotient to roughly this
      // absolute accuracy; relative error is only meaningful well above it.
      const double noise =
          kNoiseFactor * std::numeric_limits<double>::epsilon() * std::max({std::abs(plus), std::abs(minus), 1.0}) / h;
      const double floor = std::max(kMagnitudeFloor, noise / tol);
      ++report.elements_checked;
      if (std::abs(a) > floor && std::abs(numeric) > floor) {
        const double rel = abs_err / std::max(std::abs(a), std::abs(numeric));
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_tensor = ti;
          report.worst_index = i;
        }
        if (rel > tol) report.passed = false;
      } else {
        report.max_abs_error = std::max(report.max_abs_error, abs_err);
        if (abs_err > tol * floor) report.passed = false;
      }
    }
    t.zero_grad();
  }
  return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor64(const Tensor64&)>& f,
                                  const Tensor64& x, double h, double tol) {
  auto leaf = x.clone();
  return finite_diff_check([&] { return f(leaf); }, {leaf}, h, tol);
}

}  // namespace pdse

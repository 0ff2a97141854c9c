#include "pdse/losses.hpp"

#include <cmath>
#include <string>

#include "pdse/anchors.hpp"
#include "pdse/ops.hpp"

namespace pdse {

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

template <typename T>
FocalLossResult<T> focal_loss(const BasicTensor<T>& logits, const std::vector<int>& labels,
                              FocalLossOptions options) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ShapeError("focal_loss: logits " + shape_str(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto m = logits.dim(0), k = logits.dim(1);
  FocalLossResult<T> result;
  std::int64_t kept = 0;
  for (const int label : labels) {
    if (label > k) throw ShapeError("focal_loss: label " + std::to_string(label) + " exceeds class count");
    if (label != kLabelIgnore) ++kept;
    if (label > 0) ++result.num_positive;
  }
  result.all_ignored = m > 0 && kept == 0;
  const double norm = 1.0 / static_cast<double>(std::max<std::int64_t>(1, result.num_positive));
  const double alpha = options.alpha, gamma = options.gamma;

  const auto z = logits.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label == kLabelIgnore) continue;
    for (std::int64_t c = 0; c < k; ++c) {
      const double v = static_cast<double>(z[static_cast<std::size_t>(i * k + c)]);
      if (label == c + 1) {
        total += alpha * std::pow(stable_sigmoid(-v), gamma) * softplus(-v);
      } else {
        total += (1.0 - alpha) * std::pow(stable_sigmoid(v), gamma) * softplus(v);
      }
    }
  }
  result.loss = make_op_result<T>(
      "focal_loss", Shape{1}, {static_cast<T>(total * norm)}, {logits},
      [logits, labels, k, norm, alpha, gamma](std::span<const T> g, std::span<std::vector<T>*> grads) {
        auto& gz = *grads[0];
        const auto zv = logits.data();
        const double upstream = static_cast<double>(g[0]) * norm;
        for (std::size_t i = 0; i < labels.size(); ++i) {
          const int label = labels[i];
          if (label == kLabelIgnore) continue;
          for (std::int64_t c = 0; c < k; ++c) {
            const std::size_t idx = i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c);
            const double v = static_cast<double>(zv[idx]);
            const double p = stable_sigmoid(v), q = stable_sigmoid(-v);
            double d;
            if (label == c + 1) {
              // log p = -softplus(-v)
              d = alpha * std::pow(q, gamma) * (-gamma * p * softplus(-v) - q);
            } else {
              d = (1.0 - alpha) * std::pow(p, gamma) * (p + gamma * q * softplus(v));
            }
            gz[idx] += static_cast<T>(upstream * d);
          }
        }
      });
  return result;
}

template <typename T>
BasicTensor<T> smooth_l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double beta) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1_loss: shape mismatch (" + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()) + ")");
  }
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1_loss: beta must be positive");
  const auto n = pred.numel();
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  const auto pv = pred.data(), tv = target.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pv[static_cast<std::size_t>(i)]) - static_cast<double>(tv[static_cast<std::size_t>(i)]);
    const double a = std::abs(d);
    total += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  const BasicTensor<T> target_values = target.detach();
  return make_op_result<T>(
      "smooth_l1_loss", Shape{1}, {static_cast<T>(total * inv_n)}, {pred},
      [pred, target_values, beta, inv_n](std::span<const T> g, std::span<std::vector<T>*> grads) {
        auto& gp = *grads[0];
        const auto pv = pred.data(), tv = target_values.data();
        const double upstream = static_cast<double>(g[0]) * inv_n;
        for (std::size_t i = 0; i < gp.size(); ++i) {
          const double d = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
          const double slope = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
          gp[i] += static_cast<T>(upstream * slope);
        }
      });
}

template <typename T>
BasicTensor<T> box_regression_loss(const BasicTensor<T>& deltas, const std::vector<std::int64_t>& positives,
                                   const std::vector<std::array<double, 4>>& targets, double beta) {
  if (positives.size() != targets.size()) throw ShapeError("box_regression_loss: one target per positive required");
  if (positives.empty()) return BasicTensor<T>::scalar(T(0));
  std::vector<T> flat;
  flat.reserve(targets.size() * 4);
  for (const auto& t : targets)
    for (const double v : t) flat.push_back(static_cast<T>(v));
  const BasicTensor<T> target({static_cast<std::int64_t>(targets.size()), 4}, std::move(flat));
  return smooth_l1_loss(ops::gather_rows(deltas, positives), target, beta);
}

template FocalLossResult<float> focal_loss(const BasicTensor<float>&, const std::vector<int>&, FocalLossOptions);
template FocalLossResult<double> focal_loss(const BasicTensor<double>&, const std::vector<int>&, FocalLossOptions);
template BasicTensor<float> smooth_l1_loss(const BasicTensor<float>&, const BasicTensor<float>&, double);
template BasicTensor<double> smooth_l1_loss(const BasicTensor<double>&, const BasicTensor<double>&, double);
template BasicTensor<float> box_regression_loss(const BasicTensor<float>&, const std::vector<std::int64_t>&,
                                                const std::vector<std::array<double, 4>>&, double);
template BasicTensor<double> box_regression_loss(const BasicTensor<double>&, const std::vector<std::int64_t>&,
                                                 const std::vector<std::array<double, 4>>&, double);

}  // namespace pdse

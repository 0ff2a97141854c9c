#include "pdse/gradient_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string_view>

#include "pdse/detection_ops.hpp"
#include "pdse/gradcheck.hpp"
#include "pdse/losses.hpp"
#include "pdse/ops.hpp"
#include "pdse/rng.hpp"

namespace pdse {

namespace {

// Distance from any kink to the evaluation point. Perturbations of size h
// move intermediate values by far less than this.
constexpr double kMargin = 1e-3;
constexpr int kMaxRedraws = 1000;

struct Instance {
  std::function<Tensor64()> f;
  std::vector<Tensor64> wrt;
};

using Generator = std::function<std::optional<Instance>(Rng&)>;

struct Check {
  const char* name;
  Generator make;
};

Tensor64 randn(Rng& rng, const Shape& shape, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor64(shape, std::move(v));
}

Tensor64 away_from_zero(Rng& rng, const Shape& shape) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 2.0);
  return Tensor64(shape, std::move(v));
}

std::int64_t dim(Rng& rng, std::int64_t lo, std::int64_t hi) { return rng.uniform_int(lo, hi); }

double dist_to_integer(double v) { return std::abs(v - std::round(v)); }

bool all_away_from_integers(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return dist_to_integer(v) >= kMargin; });
}

bool all_away_from_zero(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::abs(v) >= kMargin; });
}

// Reduces an op output to a scalar through a fixed random projection, so
// every output element contributes with a distinct weight.
Instance projected(Rng& rng, std::function<Tensor64()> op, std::vector<Tensor64> wrt) {
  Shape shape;
  {
    NoGradGuard guard;
    shape = op().shape();
  }
  const auto proj = randn(rng, shape);
  return {[op = std::move(op), proj] { return ops::sum(ops::mul(op(), proj)); }, std::move(wrt)};
}

// Same reduction without mul or sum, for checking those two ops: a sign
// flip in the checked op would otherwise cancel against the reduction.
Instance projected_by_matmul(Rng& rng, std::function<Tensor64()> op, std::vector<Tensor64> wrt) {
  std::int64_t n = 0;
  {
    NoGradGuard guard;
    n = op().numel();
  }
  const auto proj = randn(rng, {n, 1});
  return {[op = std::move(op), proj, n] { return ops::matmul(ops::reshape(op(), {1, n}), proj); }, std::move(wrt)};
}

Shape broadcast_shape(Rng& rng, const Shape& full) {
  Shape s = full;
  for (auto& e : s)
    if (rng.uniform() < 0.4) e = 1;
  return s;
}

std::vector<Check> make_checks() {
  std::vector<Check> checks;

  const auto binary = [](const char* name, Tensor64 (*fn)(const Tensor64&, const Tensor64&)) {
    const bool is_mul = std::string_view(name) == "mul";
    return Check{name, [fn, is_mul](Rng& rng) -> std::optional<Instance> {
                   const Shape full{dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)};
                   const auto a = randn(rng, full), b = randn(rng, broadcast_shape(rng, full));
                   if (is_mul) return projected_by_matmul(rng, [=] { return fn(a, b); }, {a, b});
                   return projected(rng, [=] { return fn(a, b); }, {a, b});
                 }};
  };
  checks.push_back(binary("add", &ops::add<double>));
  checks.push_back(binary("sub", &ops::sub<double>));
  checks.push_back(binary("mul", &ops::mul<double>));

  checks.push_back({"scale", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 5), dim(rng, 1, 5)});
                      const double k = rng.uniform(-3.0, 3.0);
                      return projected(rng, [=] { return ops::scale(x, k); }, {x});
                    }});
  checks.push_back({"relu", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = away_from_zero(rng, {dim(rng, 1, 3), dim(rng, 1, 6), dim(rng, 1, 6)});
                      return projected(rng, [=] { return ops::relu(x); }, {x});
                    }});
  checks.push_back({"sigmoid", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 3), dim(rng, 1, 6)}, 2.0);
                      return projected(rng, [=] { return ops::sigmoid(x); }, {x});
                    }});
  checks.push_back({"matmul", [](Rng& rng) -> std::optional<Instance> {
                      const auto m = dim(rng, 1, 5), k = dim(rng, 1, 5), n = dim(rng, 1, 5);
                      const auto a = randn(rng, {m, k}), b = randn(rng, {k, n});
                      return projected(rng, [=] { return ops::matmul(a, b); }, {a, b});
                    }});
  checks.push_back({"linear", [](Rng& rng) -> std::optional<Instance> {
                      const auto n = dim(rng, 1, 4), in = dim(rng, 1, 5), out = dim(rng, 1, 5);
                      const auto x = randn(rng, {n, in}), w = randn(rng, {out, in});
                      if (rng.uniform() < 0.5) return projected(rng, [=] { return ops::linear(x, w); }, {x, w});
                      const auto b = randn(rng, {out});
                      return projected(rng, [=] { return ops::linear(x, w, b); }, {x, w, b});
                    }});
  checks.push_back({"conv2d", [](Rng& rng) -> std::optional<Instance> {
                      const int k = static_cast<int>(2 * rng.uniform_int(0, 2) + 1);
                      const ops::Conv2dOptions opts{static_cast<int>(rng.uniform_int(1, 2)),
                                                    static_cast<int>(rng.uniform_int(0, k / 2 + 1))};
                      const auto n = dim(rng, 1, 2), ci = dim(rng, 1, 3), co = dim(rng, 1, 3);
                      const auto h = dim(rng, std::max(1, k - 2 * opts.padding), 6);
                      const auto w = dim(rng, std::max(1, k - 2 * opts.padding), 6);
                      const auto x = randn(rng, {n, ci, h, w}), wt = randn(rng, {co, ci, k, k}), b = randn(rng, {co});
                      return projected(rng, [=] { return ops::conv2d(x, wt, b, opts); }, {x, wt, b});
                    }});
  checks.push_back({"max_pool2d", [](Rng& rng) -> std::optional<Instance> {
                      const int k = static_cast<int>(rng.uniform_int(2, 3));
                      const int s = static_cast<int>(rng.uniform_int(1, 2));
                      const int p = static_cast<int>(rng.uniform_int(0, k / 2));
                      const Shape shape{dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, k, 6), dim(rng, k, 6)};
                      // Distinct values 0.1 apart: no window has a tie.
                      std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
                      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i);
                      rng.shuffle(v);
                      const Tensor64 x(shape, std::move(v));
                      return projected(rng, [=] { return ops::max_pool2d(x, k, s, p); }, {x});
                    }});
  checks.push_back({"avg_pool2d", [](Rng& rng) -> std::optional<Instance> {
                      const int k = static_cast<int>(rng.uniform_int(2, 3));
                      const int s = static_cast<int>(rng.uniform_int(1, 2));
                      const int p = static_cast<int>(rng.uniform_int(0, k / 2));
                      const auto x = randn(rng, {dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, k, 6), dim(rng, k, 6)});
                      return projected(rng, [=] { return ops::avg_pool2d(x, k, s, p); }, {x});
                    }});
  checks.push_back({"global_avg_pool", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5)});
                      return projected(rng, [=] { return ops::global_avg_pool(x); }, {x});
                    }});
  checks.push_back({"upsample_nearest2x", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)});
                      return projected(rng, [=] { return ops::upsample_nearest2x(x); }, {x});
                    }});
  checks.push_back({"concat", [](Rng& rng) -> std::optional<Instance> {
                      Shape base{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
                      const auto axis = static_cast<std::size_t>(rng.uniform_int(0, 2));
                      std::vector<Tensor64> parts;
                      for (std::int64_t i = 0, n = dim(rng, 1, 3); i < n; ++i) {
                        Shape s = base;
                        s[axis] = dim(rng, 1, 3);
                        parts.push_back(randn(rng, s));
                      }
                      return projected(rng, [=] { return ops::concat(parts, axis); }, parts);
                    }});
  checks.push_back({"batch_norm", [](Rng& rng) -> std::optional<Instance> {
                      const auto c = dim(rng, 1, 3);
                      const Shape shape{dim(rng, 1, 3), c, dim(rng, 1, 3), dim(rng, 2, 3)};
                      const auto x = randn(rng, shape, rng.uniform(0.5, 2.0));
                      const auto gamma = randn(rng, {c}), beta = randn(rng, {c});
                      const bool training = rng.uniform() < 0.7;
                      ops::BatchNormState<double> proto;
                      proto.running_mean = randn(rng, {c});
                      std::vector<double> var(static_cast<std::size_t>(c));
                      for (auto& v : var) v = rng.uniform(0.5, 2.0);
                      proto.running_var = Tensor64({c}, var);
                      return projected(
                          rng,
                          [=] {
                            // Fresh statistics per call keep the function pure.
                            auto state = proto;
                            state.running_mean = proto.running_mean.clone();
                            state.running_var = proto.running_var.clone();
                            return ops::batch_norm(x, gamma, beta, state, training);
                          },
                          {x, gamma, beta});
                    }});
  checks.push_back({"sum", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 4), dim(rng, 1, 4)});
                      return projected_by_matmul(rng, [=] { return ops::sum(x); }, {x});
                    }});
  checks.push_back({"mean", [](Rng& rng) -> std::optional<Instance> {
                      const auto x = randn(rng, {dim(rng, 1, 4), dim(rng, 1, 4)});
                      return projected_by_matmul(rng, [=] { return ops::mean(x); }, {x});
                    }});
  checks.push_back({"reshape", [](Rng& rng) -> std::optional<Instance> {
                      const auto a = dim(rng, 1, 4), b = dim(rng, 1, 4), c = dim(rng, 1, 4);
                      const auto x = randn(rng, {a, b, c});
                      return projected(rng, [=] { return ops::reshape(x, {a * b, c}); }, {x});
                    }});
  checks.push_back({"gather_rows", [](Rng& rng) -> std::optional<Instance> {
                      const auto m = dim(rng, 1, 6), d = dim(rng, 1, 4);
                      std::vector<std::int64_t> idx(static_cast<std::size_t>(dim(rng, 1, 8)));
                      for (auto& i : idx) i = rng.uniform_int(0, m - 1);
                      const auto x = randn(rng, {m, d});
                      return projected(rng, [=] { return ops::gather_rows(x, idx); }, {x});
                    }});
  checks.push_back({"to_anchor_major", [](Rng& rng) -> std::optional<Instance> {
                      const auto a = dim(rng, 1, 3), k = dim(rng, 1, 3);
                      const auto x = randn(rng, {dim(rng, 1, 2), a * k, dim(rng, 1, 3), dim(rng, 1, 3)});
                      return projected(rng, [=] { return ops::to_anchor_major(x, a); }, {x});
                    }});

  checks.push_back({"sample_points", [](Rng& rng) -> std::optional<Instance> {
                      const auto c = dim(rng, 1, 3), h = dim(rng, 1, 5), w = dim(rng, 1, 5), p = dim(rng, 1, 8);
                      const auto map = randn(rng, {c, h, w});
                      std::vector<double> coords(static_cast<std::size_t>(2 * p));
                      for (std::size_t i = 0; i < coords.size(); ++i) {
                        const double extent = static_cast<double>(i % 2 == 0 ? h : w);
                        do coords[i] = rng.uniform(-1.5, extent + 0.5);
                        while (dist_to_integer(coords[i]) < 0.01);
                      }
                      const Tensor64 pts({p, 2}, std::move(coords));
                      return projected(rng, [=] { return sample_points(map, pts); }, {map, pts});
                    }});
  checks.push_back({"deformable_conv2d", [](Rng& rng) -> std::optional<Instance> {
                      const ops::Conv2dOptions opts{static_cast<int>(rng.uniform_int(1, 2)),
                                                    static_cast<int>(rng.uniform_int(0, 1))};
                      const auto n = dim(rng, 1, 2), ci = dim(rng, 1, 2), co = dim(rng, 1, 2);
                      const auto h = dim(rng, 3, 5), w = dim(rng, 3, 5);
                      const auto oh = (h + 2 * opts.padding - 3) / opts.stride + 1;
                      const auto ow = (w + 2 * opts.padding - 3) / opts.stride + 1;
                      const auto x = randn(rng, {n, ci, h, w});
                      std::vector<double> off(static_cast<std::size_t>(n * 18 * oh * ow));
                      for (auto& v : off) {
                        do v = rng.uniform(-1.5, 1.5);
                        while (dist_to_integer(v) < 0.01);
                      }
                      const Tensor64 offsets({n, 18, oh, ow}, std::move(off));
                      const auto wt = randn(rng, {co, ci, 3, 3}), b = randn(rng, {co});
                      return projected(rng, [=] { return deformable_conv2d(x, offsets, wt, b, opts); },
                                       {x, offsets, wt, b});
                    }});
  checks.push_back({"deformable_conv2d_predicted_offsets", [](Rng& rng) -> std::optional<Instance> {
                      ParameterStore<double> store(rng.next_u64());
                      const auto ci = dim(rng, 1, 2), co = dim(rng, 1, 2);
                      auto p = DeformableConvParams<double>::create(store, "d", ci, co);
                      p.offset_weight = randn(rng, p.offset_weight.shape(), 0.3);
                      p.offset_bias = randn(rng, p.offset_bias.shape(), 0.7);
                      const auto x = randn(rng, {1, ci, dim(rng, 3, 5), dim(rng, 3, 5)});
                      {
                        NoGradGuard guard;
                        const auto off = ops::conv2d(x, p.offset_weight, p.offset_bias, {p.stride, p.padding});
                        if (!all_away_from_integers(off.data())) return std::nullopt;
                      }
                      return projected(rng, [=] { return deformable_conv2d(x, p); },
                                       {x, p.weight, p.bias, p.offset_weight, p.offset_bias});
                    }});
  checks.push_back({"se_block", [](Rng& rng) -> std::optional<Instance> {
                      const auto r = dim(rng, 1, 2);
                      const auto c = r * dim(rng, 1, 3);
                      ParameterStore<double> store(rng.next_u64());
                      auto p = SEParams<double>::create(store, "se", c, r);
                      const auto x = randn(rng, {dim(rng, 1, 2), c, dim(rng, 1, 4), dim(rng, 1, 4)});
                      {
                        NoGradGuard guard;
                        const auto hidden = ops::linear(se_squeeze(x), p.w1);
                        if (!all_away_from_zero(hidden.data())) return std::nullopt;
                      }
                      return projected(rng, [=] { return se_block(x, p); }, {x, p.w1, p.w2});
                    }});
  checks.push_back({"local_attention", [](Rng& rng) -> std::optional<Instance> {
                      const auto c = dim(rng, 1, 4);
                      LocalAttentionParams<double> p;
                      p.weight = randn(rng, {1, c, 1, 1});
                      p.bias = randn(rng, {1});
                      const auto x = randn(rng, {dim(rng, 1, 2), c, dim(rng, 1, 4), dim(rng, 1, 4)});
                      return projected(rng, [=] { return local_attention(x, p); }, {x, p.weight, p.bias});
                    }});
  checks.push_back({"dse_block", [](Rng& rng) -> std::optional<Instance> {
                      const auto c = 2 * dim(rng, 1, 2);
                      const auto r = c % 2 == 0 && rng.uniform() < 0.5 ? 2 : 1;
                      ParameterStore<double> store(rng.next_u64());
                      auto p = DSEBlockParams<double>::create(store, "dse", c, r);
                      p.entry_bias = randn(rng, p.entry_bias.shape(), 0.3);
                      p.deform.offset_weight = randn(rng, p.deform.offset_weight.shape(), 0.3);
                      p.deform.offset_bias = randn(rng, p.deform.offset_bias.shape(), 0.7);
                      p.local.weight = randn(rng, p.local.weight.shape(), 0.5);
                      p.local.bias = randn(rng, p.local.bias.shape(), 0.5);
                      const auto x = randn(rng, {1, c, dim(rng, 3, 5), dim(rng, 3, 5)});
                      {
                        NoGradGuard guard;
                        const auto pre = ops::conv2d(x, p.entry_weight, p.entry_bias);
                        if (!all_away_from_zero(pre.data())) return std::nullopt;
                        const auto mid = ops::relu(pre);
                        const auto off = ops::conv2d(mid, p.deform.offset_weight, p.deform.offset_bias,
                                                     {p.deform.stride, p.deform.padding});
                        if (!all_away_from_integers(off.data())) return std::nullopt;
                        const auto f = ops::conv2d(deformable_conv2d(mid, p.deform), p.exit_weight, p.exit_bias);
                        if (!all_away_from_zero(ops::linear(se_squeeze(f), p.se.w1).data())) return std::nullopt;
                      }
                      auto wrt = p.tensors();
                      wrt.push_back(x);
                      return projected(rng, [=] { return dse_block(x, p); }, wrt);
                    }});
  checks.push_back({"focal_loss", [](Rng& rng) -> std::optional<Instance> {
                      const auto m = dim(rng, 1, 8), k = dim(rng, 1, 4);
                      const auto logits = randn(rng, {m, k}, 2.0);
                      std::vector<int> labels(static_cast<std::size_t>(m));
                      for (auto& l : labels) l = static_cast<int>(rng.uniform_int(-1, k));
                      if (std::all_of(labels.begin(), labels.end(), [](int l) { return l == -1; })) labels[0] = 0;
                      const FocalLossOptions opts{rng.uniform(0.1, 0.9), rng.uniform(0.0, 3.0)};
                      return Instance{[=] { return focal_loss(logits, labels, opts).loss; }, {logits}};
                    }});
  checks.push_back({"smooth_l1_loss", [](Rng& rng) -> std::optional<Instance> {
                      const Shape shape{dim(rng, 1, 6), 4};
                      const double beta = rng.uniform() < 0.5 ? 1.0 / 9.0 : rng.uniform(0.05, 1.0);
                      const auto pred = randn(rng, shape, 0.5), target = randn(rng, shape, 0.5);
                      for (std::size_t i = 0; i < pred.data().size(); ++i) {
                        if (std::abs(std::abs(pred.data()[i] - target.data()[i]) - beta) < kMargin) return std::nullopt;
                      }
                      return Instance{[=] { return smooth_l1_loss(pred, target, beta); }, {pred}};
                    }});
  checks.push_back({"box_regression_loss", [](Rng& rng) -> std::optional<Instance> {
                      const auto m = dim(rng, 1, 8);
                      const auto deltas = randn(rng, {m, 4}, 0.5);
                      std::vector<std::int64_t> pos;
                      std::vector<std::array<double, 4>> targets;
                      for (std::int64_t i = 0; i < m; ++i) {
                        if (rng.uniform() >= 0.6 && !(i == m - 1 && pos.empty())) continue;
                        std::array<double, 4> t{};
                        for (int j = 0; j < 4; ++j) {
                          t[static_cast<std::size_t>(j)] = 0.5 * rng.normal();
                          const double d = deltas.data()[static_cast<std::size_t>(i * 4 + j)] - t[static_cast<std::size_t>(j)];
                          if (std::abs(std::abs(d) - 1.0 / 9.0) < kMargin) return std::nullopt;
                        }
                        pos.push_back(i);
                        targets.push_back(t);
                      }
                      return Instance{[=] { return box_regression_loss(deltas, pos, targets); }, {deltas}};
                    }});
  return checks;
}

}  // namespace

std::vector<std::string> gradient_suite_checks() {
  std::vector<std::string> names;
  for (const auto& c : make_checks()) names.emplace_back(c.name);
  return names;
}

std::vector<OpCheckResult> run_gradient_suite(const GradientSuiteOptions& options,
                                              const std::function<void(const OpCheckResult&)>& on_result) {
  std::vector<OpCheckResult> results;
  for (const auto& check : make_checks()) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), check.name) == options.only.end()) {
      continue;
    }
    OpCheckResult res;
    res.name = check.name;
    Rng rng(derive_seed(options.seed, std::string("gradcheck/") + check.name));
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < options.instances; ++i) {
      std::optional<Instance> inst;
      for (int attempt = 0; attempt < kMaxRedraws && !inst; ++attempt) {
        inst = check.make(rng);
        if (!inst) ++res.resamples;
      }
      ++res.instances;
      if (!inst) {
        ++res.failures;
        if (res.first_failure.empty()) res.first_failure = "no generic-position instance found";
        continue;
      }
      try {
        const auto report = finite_diff_check(inst->f, inst->wrt, options.h, options.tol);
        res.max_rel_error = std::max(res.max_rel_error, report.max_rel_error);
        res.max_abs_error = std::max(res.max_abs_error, report.max_abs_error);
        if (!report.passed) {
          ++res.failures;
          if (res.first_failure.empty()) {
            res.first_failure = "instance " + std::to_string(i) + ": tensor " + std::to_string(report.worst_tensor) +
                                " element " + std::to_string(report.worst_index);
          }
        }
      } catch (const std::exception& e) {
        ++res.failures;
        if (res.first_failure.empty()) res.first_failure = "instance " + std::to_string(i) + ": " + e.what();
      }
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_result) on_result(res);
    results.push_back(std::move(res));
  }
  return results;
}

std::string format_gradient_report(const std::vector<OpCheckResult>& results) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-38s %6s %6s %12s %12s %8s\n", "op", "runs", "fail", "max_rel_err", "max_abs_err",
                "seconds");
  out += buf;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-38s %6d %6d %12.3e %12.3e %8.2f  %s\n", r.name.c_str(), r.instances, r.failures,
                  r.max_rel_error, r.max_abs_error, r.seconds, r.passed() ? "PASS" : "FAIL");
    out += buf;
    if (!r.first_failure.empty()) out += "    first failure: " + r.first_failure + "\n";
  }
  return out;
}

}  // namespace pdse

#include "pdse/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace pdse::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Left-to-right sum. Eigen's vectorized reductions peel by runtime
// alignment, which makes the rounding depend on where the buffer lives.
template <typename T>
T ordered_sum(const T* p, std::int64_t n) {
  T s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += p[i];
  return s;
}

[[noreturn]] void shape_fail(const char* op, const std::string& what, const Shape& a,
                             const Shape& b) {
  throw ShapeError(std::string(op) + ": " + what + " (" + shape_str(a) + " vs " + shape_str(b) +
                   ")");
}

[[noreturn]] void shape_fail(const char* op, const std::string& what, const Shape& a) {
  throw ShapeError(std::string(op) + ": " + what + " (" + shape_str(a) + ")");
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) shape_fail(op, "expected rank " + std::to_string(rank), s);
}

// For each element of `target`, the flat index of the broadcast source.
std::vector<std::int64_t> broadcast_map(const char* op, const Shape& target, const Shape& source) {
  if (target.size() != source.size()) shape_fail(op, "rank mismatch", target, source);
  const std::size_t rank = target.size();
  std::vector<std::int64_t> src_stride(rank, 0);
  std::int64_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    if (source[i] != target[i] && source[i] != 1) {
      shape_fail(op, "operand not broadcastable", target, source);
    }
    src_stride[i] = source[i] == 1 ? 0 : stride;
    stride *= source[i];
  }
  const auto n = shape_numel(target);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    map[static_cast<std::size_t>(flat)] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < target[ax]) break;
      src -= src_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, int pad) {
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

// col[(c*k + ky)*k + kx][oy*OW + ox]
template <typename T>
void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w, int k, int stride,
            int pad, std::int64_t oh, std::int64_t ow, T* col) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = x + (c * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t h, std::int64_t w, int k, int stride,
            int pad, std::int64_t oh, std::int64_t ow, T* dx) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = dx + (c * h + iy) * w;
          const T* src = row + oy * ow;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> binary_broadcast(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b,
                                bool multiply, T b_sign) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const auto av = a.data();
  const auto bv = b.data();
  const bool same = as == bs;
  std::vector<std::int64_t> map;
  if (!same) map = broadcast_map(op, as, bs);
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T rhs = bv[same ? i : static_cast<std::size_t>(map[i])];
    out[i] = multiply ? av[i] * rhs : av[i] + b_sign * rhs;
  }
  return make_op_result<T>(
      op, as, std::move(out), {a, b},
      [a, b, multiply, b_sign, same, map = std::move(map)](std::span<const T> g,
                                                           std::span<std::vector<T>*> grads) {
        const auto av = a.data();
        const auto bv = b.data();
        if (auto* ga = grads[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T rhs = bv[same ? i : static_cast<std::size_t>(map[i])];
            (*ga)[i] += multiply ? g[i] * rhs : g[i];
          }
        }
        if (auto* gb = grads[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const auto j = same ? i : static_cast<std::size_t>(map[i]);
            (*gb)[j] += multiply ? g[i] * av[i] : b_sign * g[i];
          }
        }
      });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_broadcast("add", a, b, false, T(1));
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_broadcast("sub", a, b, false, T(-1));
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary_broadcast("mul", a, b, true, T(1));
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op_result<T>("scale", a.shape(), std::move(out), {a},
                           [factor](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& ga = *grads[0];
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
                           });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_op_result<T>("relu", x.shape(), std::move(out), {x},
                           [x](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             const auto xv = x.data();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               if (xv[i] > T(0)) gx[i] += g[i];
                             }
                           });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    // Split on sign so exp never overflows.
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  auto result = make_op_result<T>("sigmoid", x.shape(), out, {x}, nullptr);
  if (result.impl()->grad_fn) {
    result.impl()->grad_fn->backward = [y = std::move(out)](std::span<const T> g,
                                                            std::span<std::vector<T>*> grads) {
      auto& gx = *grads[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    };
  }
  return result;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_fail("matmul", "inner extents differ", a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_op_result<T>(
      "matmul", Shape{m, n}, std::move(out), {a, b},
      [a, b, m, k, n](std::span<const T> g, std::span<std::vector<T>*> grads) {
        ConstMatMap<T> gm(g.data(), m, n);
        if (auto* ga = grads[0]) {
          MatMap<T>(ga->data(), m, k).noalias() += gm * ConstMatMap<T>(b.data().data(), k, n).transpose();
        }
        if (auto* gb = grads[1]) {
          MatMap<T>(gb->data(), k, n).noalias() += ConstMatMap<T>(a.data().data(), m, k).transpose() * gm;
        }
      });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank("linear", x.shape(), 2);
  require_rank("linear", weight.shape(), 2);
  const auto n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) shape_fail("linear", "input features differ from weight", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    shape_fail("linear", "bias must be [out]", bias.shape(), weight.shape());
  }
  std::vector<T> out(static_cast<std::size_t>(n * out_f));
  MatMap<T> ym(out.data(), n, out_f);
  ym.noalias() = ConstMatMap<T>(x.data().data(), n, in) *
                 ConstMatMap<T>(weight.data().data(), out_f, in).transpose();
  if (bias.defined()) {
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t o = 0; o < out_f; ++o) ym(r, o) += bias.data()[o];
  }
  return make_op_result<T>(
      "linear", Shape{n, out_f}, std::move(out),
      {x, weight, bias.defined() ? bias : BasicTensor<T>::scalar(0)},
      [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
        ConstMatMap<T> gm(g.data(), n, out_f);
        if (auto* gx = grads[0]) {
          MatMap<T>(gx->data(), n, in).noalias() += gm * ConstMatMap<T>(weight.data().data(), out_f, in);
        }
        if (auto* gw = grads[1]) {
          MatMap<T>(gw->data(), out_f, in).noalias() += gm.transpose() * ConstMatMap<T>(x.data().data(), n, in);
        }
        if (auto* gb = grads[2]; gb && bias.defined()) {
          for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t o = 0; o < out_f; ++o) (*gb)[o] += gm(r, o);
        }
      });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dOptions options) {
  const char* op = "conv2d";
  require_rank(op, input.shape(), 4);
  require_rank(op, weight.shape(), 4);
  const auto n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto co = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != ci) shape_fail(op, "input channels differ from weight", input.shape(), weight.shape());
  if (weight.dim(3) != k || k % 2 == 0) shape_fail(op, "kernel must be square with odd extent", weight.shape());
  if (options.stride < 1 || options.padding < 0) shape_fail(op, "stride must be >= 1 and padding >= 0", weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    shape_fail(op, "bias must be [O]", bias.shape(), weight.shape());
  }
  const int s = options.stride, p = options.padding;
  const auto oh = conv_out_extent(h, k, s, p), ow = conv_out_extent(w, k, s, p);
  if (oh <= 0 || ow <= 0) shape_fail(op, "non-positive output size", input.shape(), weight.shape());

  const std::int64_t patch = ci * k * k;
  const std::int64_t cols = oh * ow;
  const bool direct = k == 1 && s == 1 && p == 0;  // input plane is already the column matrix
  const bool keep_cols = grad_recording_enabled() && weight.requires_grad() && !direct;

  std::vector<T> out(static_cast<std::size_t>(n * co * cols));
  std::vector<std::vector<T>> saved_cols;
  std::vector<T> col;
  ConstMatMap<T> wm(weight.data().data(), co, patch);
  for (std::int64_t b = 0; b < n; ++b) {
    const T* x = input.data().data() + b * ci * h * w;
    const T* colp = x;
    if (!direct) {
      col.resize(static_cast<std::size_t>(patch * cols));
      im2col(x, ci, h, w, k, s, p, oh, ow, col.data());
      colp = col.data();
    }
    MatMap<T> ym(out.data() + b * co * cols, co, cols);
    ym.noalias() = wm * ConstMatMap<T>(colp, patch, cols);
    if (bias.defined()) {
      for (std::int64_t o = 0; o < co; ++o) ym.row(o).array() += bias.data()[o];
    }
    if (keep_cols) saved_cols.push_back(col);
  }

  return make_op_result<T>(
      op, Shape{n, co, oh, ow}, std::move(out), {input, weight, bias.defined() ? bias : BasicTensor<T>::scalar(0)},
      [=, saved_cols = std::move(saved_cols)](std::span<const T> g, std::span<std::vector<T>*> grads) {
        ConstMatMap<T> wm(weight.data().data(), co, patch);
        std::vector<T> col, dcol;
        for (std::int64_t b = 0; b < n; ++b) {
          ConstMatMap<T> gm(g.data() + b * co * cols, co, cols);
          if (auto* gw = grads[1]) {
            const T* colp;
            if (direct) {
              colp = input.data().data() + b * ci * h * w;
            } else if (!saved_cols.empty()) {
              colp = saved_cols[static_cast<std::size_t>(b)].data();
            } else {
              col.resize(static_cast<std::size_t>(patch * cols));
              im2col(input.data().data() + b * ci * h * w, ci, h, w, k, s, p, oh, ow, col.data());
              colp = col.data();
            }
            MatMap<T>(gw->data(), co, patch).noalias() += gm * ConstMatMap<T>(colp, patch, cols).transpose();
          }
          if (auto* gb = grads[2]; gb && bias.defined()) {
            for (std::int64_t o = 0; o < co; ++o) (*gb)[o] += ordered_sum(gm.data() + o * cols, cols);
          }
          if (auto* gx = grads[0]) {
            T* dx = gx->data() + b * ci * h * w;
            if (direct) {
              MatMap<T>(dx, ci, cols).noalias() += wm.transpose() * gm;
            } else {
              dcol.resize(static_cast<std::size_t>(patch * cols));
              MatMap<T>(dcol.data(), patch, cols).noalias() = wm.transpose() * gm;
              col2im(dcol.data(), ci, h, w, k, s, p, oh, ow, dx);
            }
          }
        }
      });
}

namespace {

template <typename T>
void check_pool(const char* op, const BasicTensor<T>& x, int kernel, int stride, int padding,
                std::int64_t& oh, std::int64_t& ow) {
  require_rank(op, x.shape(), 4);
  if (kernel < 1 || stride < 1 || padding < 0 || 2 * padding > kernel) {
    shape_fail(op, "invalid kernel/stride/padding", x.shape());
  }
  oh = conv_out_extent(x.dim(2), kernel, stride, padding);
  ow = conv_out_extent(x.dim(3), kernel, stride, padding);
  if (oh <= 0 || ow <= 0) shape_fail(op, "non-positive output size", x.shape());
}

}  // namespace

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, int kernel, int stride, int padding) {
  std::int64_t oh = 0, ow = 0;
  check_pool("max_pool2d", x, kernel, stride, padding, oh, ow);
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  std::vector<std::int64_t> argmax(out.size());
  const auto xv = x.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const auto iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const auto ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            const auto idx = (pl * h + iy) * w + ix;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        const auto o = (pl * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return make_op_result<T>("max_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                           [argmax = std::move(argmax)](std::span<const T> g,
                                                        std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                           });
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, int kernel, int stride, int padding) {
  std::int64_t oh = 0, ow = 0;
  check_pool("avg_pool2d", x, kernel, stride, padding, oh, ow);
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  const auto xv = x.data();
  auto for_taps = [=](std::int64_t pl, std::int64_t oy, std::int64_t ox, auto&& fn) {
    for (int ky = 0; ky < kernel; ++ky) {
      const auto iy = oy * stride - padding + ky;
      if (iy < 0 || iy >= h) continue;
      for (int kx = 0; kx < kernel; ++kx) {
        const auto ix = ox * stride - padding + kx;
        if (ix >= 0 && ix < w) fn((pl * h + iy) * w + ix);
      }
    }
  };
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for_taps(pl, oy, ox, [&](std::int64_t idx) { acc += xv[idx]; });
        out[(pl * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  return make_op_result<T>("avg_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::int64_t pl = 0; pl < planes; ++pl) {
                               for (std::int64_t oy = 0; oy < oh; ++oy) {
                                 for (std::int64_t ox = 0; ox < ow; ++ox) {
                                   const T v = g[(pl * oh + oy) * ow + ox] * inv;
                                   for_taps(pl, oy, ox, [&](std::int64_t idx) { gx[idx] += v; });
                                 }
                               }
                             }
                           });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank("global_avg_pool", x.shape(), 4);
  const auto planes = x.dim(0) * x.dim(1);
  const auto area = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes));
  const auto xv = x.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    T acc = 0;
    for (std::int64_t i = 0; i < area; ++i) acc += xv[pl * area + i];
    out[pl] = acc / static_cast<T>(area);
  }
  return make_op_result<T>("global_avg_pool", Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), {x},
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::int64_t pl = 0; pl < planes; ++pl) {
                               const T v = g[pl] / static_cast<T>(area);
                               for (std::int64_t i = 0; i < area; ++i) gx[pl * area + i] += v;
                             }
                           });
}

template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  require_rank("upsample_nearest2x", x.shape(), 4);
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * 4 * h * w));
  const auto xv = x.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
        out[(pl * 2 * h + y) * 2 * w + xx] = xv[(pl * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make_op_result<T>("upsample_nearest2x", Shape{x.dim(0), x.dim(1), 2 * h, 2 * w},
                           std::move(out), {x},
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::int64_t pl = 0; pl < planes; ++pl) {
                               for (std::int64_t y = 0; y < 2 * h; ++y) {
                                 for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
                                   gx[(pl * h + y / 2) * w + xx / 2] += g[(pl * 2 * h + y) * 2 * w + xx];
                                 }
                               }
                             }
                           });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) shape_fail("concat", "axis out of range", out_shape);
  std::int64_t total = 0;
  for (const auto& part : parts) {
    const auto& s = part.shape();
    if (s.size() != out_shape.size()) shape_fail("concat", "rank mismatch", out_shape, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) shape_fail("concat", "non-concat extents differ", out_shape, s);
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& part : parts) {
    offsets.push_back(offset);
    const auto chunk = part.dim(axis) * inner;
    const auto pv = part.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * total * inner + offset * inner);
    }
    offset += part.dim(axis);
  }
  std::vector<std::int64_t> extents;
  for (const auto& part : parts) extents.push_back(part.dim(axis));
  return make_op_result<T>("concat", out_shape, std::move(out), parts,
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             for (std::size_t pi = 0; pi < grads.size(); ++pi) {
                               auto* gp = grads[pi];
                               if (!gp) continue;
                               const auto chunk = extents[pi] * inner;
                               for (std::int64_t o = 0; o < outer; ++o) {
                                 const T* src = g.data() + o * total * inner + offsets[pi] * inner;
                                 T* dst = gp->data() + o * chunk;
                                 for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                               }
                             }
                           });
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BatchNormState<T>& state, bool training) {
  const char* op = "batch_norm";
  require_rank(op, x.shape(), 4);
  const auto n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  for (const BasicTensor<T>* t : std::initializer_list<const BasicTensor<T>*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) shape_fail(op, "per-channel tensor must be [C]", x.shape(), t->shape());
  }
  const auto count = n * area;
  if (training && count < 2) shape_fail(op, "training mode needs more than one value per channel", x.shape());

  const auto xv = x.data();
  std::vector<T> mean_c(c), invstd_c(c);
  if (training) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T acc = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < area; ++i) acc += xv[(b * c + ch) * area + i];
      const T mu = acc / static_cast<T>(count);
      T var = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < area; ++i) {
          const T d = xv[(b * c + ch) * area + i] - mu;
          var += d * d;
        }
      const T biased = var / static_cast<T>(count);
      mean_c[ch] = mu;
      invstd_c[ch] = T(1) / std::sqrt(biased + state.eps);
      rm[ch] = state.momentum * rm[ch] + (T(1) - state.momentum) * mu;
      rv[ch] = state.momentum * rv[ch] + (T(1) - state.momentum) * var / static_cast<T>(count - 1);
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean_c[ch] = rm[ch];
      invstd_c[ch] = T(1) / std::sqrt(rv[ch] + state.eps);
    }
  }

  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < area; ++i) {
        const auto idx = (b * c + ch) * area + i;
        xhat[idx] = (xv[idx] - mean_c[ch]) * invstd_c[ch];
        out[idx] = gv[ch] * xhat[idx] + bv[ch];
      }
    }
  }
  return make_op_result<T>(
      op, x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), invstd_c = std::move(invstd_c)](std::span<const T> g,
                                                                 std::span<std::vector<T>*> grads) {
        const auto gv = gamma.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < area; ++i) {
              const auto idx = (b * c + ch) * area + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (auto* gg = grads[1]) (*gg)[ch] += sum_gx;
          if (auto* gb = grads[2]) (*gb)[ch] += sum_g;
          if (auto* gx = grads[0]) {
            const T cnt = static_cast<T>(count);
            const T k = gv[ch] * invstd_c[ch];
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < area; ++i) {
                const auto idx = (b * c + ch) * area + i;
                if (training) {
                  (*gx)[idx] += k * (g[idx] - sum_g / cnt - xhat[idx] * sum_gx / cnt);
                } else {
                  (*gx)[idx] += k * g[idx];
                }
              }
          }
        }
      });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  // Neumaier compensated summation.
  T acc = 0, comp = 0;
  for (const T v : x.data()) {
    const T t = acc + v;
    comp += std::abs(acc) >= std::abs(v) ? (acc - t) + v : (v - t) + acc;
    acc = t;
  }
  acc += comp;
  return make_op_result<T>("sum", Shape{1}, {acc}, {x},
                           [](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             for (auto& v : *grads[0]) v += g[0];
                           });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", "element count differs", x.shape(), shape);
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op_result<T>("reshape", shape, std::move(out), {x},
                           [](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::int64_t>& indices) {
  require_rank("gather_rows", x.shape(), 2);
  const auto rows = x.dim(0), width = x.dim(1);
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<T> out(indices.size() * static_cast<std::size_t>(width));
  const auto xv = x.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = indices[r];
    if (src < 0 || src >= rows) shape_fail("gather_rows", "row index out of range", x.shape());
    std::copy_n(xv.data() + src * width, width, out.data() + static_cast<std::int64_t>(r) * width);
  }
  return make_op_result<T>("gather_rows", Shape{static_cast<std::int64_t>(indices.size()), width},
                           std::move(out), {x},
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::size_t r = 0; r < indices.size(); ++r)
                               for (std::int64_t j = 0; j < width; ++j)
                                 gx[indices[r] * width + j] += g[r * width + j];
                           });
}

template <typename T>
BasicTensor<T> to_anchor_major(const BasicTensor<T>& x, std::int64_t anchors_per_cell) {
  require_rank("to_anchor_major", x.shape(), 4);
  const auto n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto a = anchors_per_cell;
  if (a < 1 || ch % a != 0) shape_fail("to_anchor_major", "channels not divisible by anchors per cell", x.shape());
  const auto k = ch / a;
  const auto area = h * w;
  std::vector<T> out(x.data().size());
  const auto xv = x.data();
  // out[b][(pos*A + ai)][ki] = x[b][ai*K + ki][pos]
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < ch; ++c) {
      const auto ai = c / k, ki = c % k;
      for (std::int64_t pos = 0; pos < area; ++pos)
        out[((b * area + pos) * a + ai) * k + ki] = xv[(b * ch + c) * area + pos];
    }
  return make_op_result<T>("to_anchor_major", Shape{n, area * a, k}, std::move(out), {x},
                           [=](std::span<const T> g, std::span<std::vector<T>*> grads) {
                             auto& gx = *grads[0];
                             for (std::int64_t b = 0; b < n; ++b)
                               for (std::int64_t c = 0; c < ch; ++c) {
                                 const auto ai = c / k, ki = c % k;
                                 for (std::int64_t pos = 0; pos < area; ++pos)
                                   gx[(b * ch + c) * area + pos] += g[((b * area + pos) * a + ai) * k + ki];
                               }
                           });
}

#define PDSE_INSTANTIATE(T)                                                                           \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                            \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                             \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                 Conv2dOptions);                                                      \
  template BasicTensor<T> max_pool2d(const BasicTensor<T>&, int, int, int);                           \
  template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, int, int, int);                           \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                     \
  template BasicTensor<T> upsample_nearest2x(const BasicTensor<T>&);                                  \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                    \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                     const BasicTensor<T>&, BatchNormState<T>&, bool);                \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                               \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, const std::vector<std::int64_t>&);       \
  template BasicTensor<T> to_anchor_major(const BasicTensor<T>&, std::int64_t);

PDSE_INSTANTIATE(float)
PDSE_INSTANTIATE(double)
#undef PDSE_INSTANTIATE

}  // namespace pdse::ops

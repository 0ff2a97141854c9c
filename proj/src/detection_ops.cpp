#include "pdse/detection_ops.hpp"

#include <Eigen/Core>
#include <cmath>

namespace pdse {

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

template <typename T>
T read_stencil(const BilinearStencil<T>& st, const T* plane) {
  T v = 0;
  for (int c = 0; c < 4; ++c) {
    if (st.index[c] >= 0) v += st.weight[c] * plane[st.index[c]];
  }
  return v;
}

}  // namespace

template <typename T>
BilinearStencil<T> bilinear_stencil(std::int64_t height, std::int64_t width, T y, T x) {
  BilinearStencil<T> st;
  if (!(y > T(-1)) || !(y < T(height)) || !(x > T(-1)) || !(x < T(width))) return st;
  const auto y0 = static_cast<std::int64_t>(std::floor(y));
  const auto x0 = static_cast<std::int64_t>(std::floor(x));
  const T ly = y - static_cast<T>(y0), lx = x - static_cast<T>(x0);
  const T hy = T(1) - ly, hx = T(1) - lx;
  const std::int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const std::int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const T w[4] = {hy * hx, hy * lx, ly * hx, ly * lx};
  const T wy[4] = {-hx, -lx, hx, lx};
  const T wx[4] = {-hy, hy, -ly, ly};
  for (int c = 0; c < 4; ++c) {
    if (ys[c] >= 0 && ys[c] < height && xs[c] >= 0 && xs[c] < width) {
      st.index[c] = ys[c] * width + xs[c];
    }
    st.weight[c] = w[c];
    st.d_dy[c] = wy[c];
    st.d_dx[c] = wx[c];
  }
  return st;
}

template <typename T>
std::vector<T> bilinear_sample(const BasicTensor<T>& map, T y, T x) {
  if (map.rank() != 3) throw ShapeError("bilinear_sample: map must be [C,H,W], got " + shape_str(map.shape()));
  const auto c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const auto st = bilinear_stencil<T>(h, w, y, x);
  std::vector<T> out(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) out[ch] = read_stencil(st, map.data().data() + ch * h * w);
  return out;
}

template <typename T>
BasicTensor<T> sample_points(const BasicTensor<T>& map, const BasicTensor<T>& coords) {
  if (map.rank() != 3) throw ShapeError("sample_points: map must be [C,H,W], got " + shape_str(map.shape()));
  if (coords.rank() != 2 || coords.dim(1) != 2) {
    throw ShapeError("sample_points: coords must be [P,2], got " + shape_str(coords.shape()));
  }
  const auto c = map.dim(0), h = map.dim(1), w = map.dim(2), p = coords.dim(0);
  std::vector<BilinearStencil<T>> stencils(static_cast<std::size_t>(p));
  std::vector<T> out(static_cast<std::size_t>(p * c));
  const auto cv = coords.data();
  for (std::int64_t i = 0; i < p; ++i) {
    stencils[i] = bilinear_stencil<T>(h, w, cv[2 * i], cv[2 * i + 1]);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      out[i * c + ch] = read_stencil(stencils[i], map.data().data() + ch * h * w);
    }
  }
  return make_op_result<T>(
      "sample_points", Shape{p, c}, std::move(out), {map, coords},
      [=, stencils = std::move(stencils)](std::span<const T> g, std::span<std::vector<T>*> grads) {
        const T* mv = map.data().data();
        for (std::int64_t i = 0; i < p; ++i) {
          const auto& st = stencils[i];
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const T go = g[i * c + ch];
            const T* plane = mv + ch * h * w;
            for (int k = 0; k < 4; ++k) {
              if (st.index[k] < 0) continue;
              if (auto* gm = grads[0]) (*gm)[ch * h * w + st.index[k]] += st.weight[k] * go;
              if (auto* gc = grads[1]) {
                (*gc)[2 * i] += st.d_dy[k] * plane[st.index[k]] * go;
                (*gc)[2 * i + 1] += st.d_dx[k] * plane[st.index[k]] * go;
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> deformable_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& offsets,
                                 const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                                 ops::Conv2dOptions options) {
  const char* op = "deformable_conv2d";
  if (input.rank() != 4 || weight.rank() != 4 || offsets.rank() != 4) {
    throw ShapeError(std::string(op) + ": input, offsets and weight must be rank 4");
  }
  const auto n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto co = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  const int s = options.stride, pad = options.padding;
  if (weight.dim(1) != ci) {
    throw ShapeError(std::string(op) + ": input channels differ from weight (" + shape_str(input.shape()) +
                     " vs " + shape_str(weight.shape()) + ")");
  }
  if (k != 3 || weight.dim(3) != 3) throw ShapeError(std::string(op) + ": kernel must be 3x3, got " + shape_str(weight.shape()));
  if (s < 1 || pad < 0) throw ShapeError(std::string(op) + ": invalid stride/padding");
  const std::int64_t taps = k * k;
  if (offsets.dim(1) != 2 * taps) {
    throw ConfigError(std::string(op) + ": offset tensor needs " + std::to_string(2 * taps) +
                      " channels, got " + std::to_string(offsets.dim(1)));
  }
  const auto oh = (h + 2 * pad - k) / s + 1, ow = (w + 2 * pad - k) / s + 1;
  if (h + 2 * pad < k || w + 2 * pad < k || oh <= 0 || ow <= 0) {
    throw ShapeError(std::string(op) + ": non-positive output size for " + shape_str(input.shape()));
  }
  if (offsets.dim(0) != n || offsets.dim(2) != oh || offsets.dim(3) != ow) {
    throw ShapeError(std::string(op) + ": offsets " + shape_str(offsets.shape()) + " do not match output grid " +
                     shape_str({n, 2 * taps, oh, ow}));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeError(std::string(op) + ": bias must be [O], got " + shape_str(bias.shape()));
  }

  const std::int64_t cols = oh * ow;
  const std::int64_t patch = ci * taps;
  const std::int64_t plane = h * w;

  // One stencil per (sample, tap, output position), shared by all channels.
  std::vector<BilinearStencil<T>> stencils(static_cast<std::size_t>(n * taps * cols));
  const T* off = offsets.data().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const std::int64_t t = ky * k + kx;
        const T* dy = off + (b * 2 * taps + 2 * t) * cols;
        const T* dx = dy + cols;
        for (std::int64_t oy = 0; oy < oh; ++oy)
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const auto pos = oy * ow + ox;
            const T py = static_cast<T>(oy * s - pad + ky) + dy[pos];
            const T px = static_cast<T>(ox * s - pad + kx) + dx[pos];
            stencils[(b * taps + t) * cols + pos] = bilinear_stencil<T>(h, w, py, px);
          }
      }

  std::vector<T> out(static_cast<std::size_t>(n * co * cols));
  std::vector<std::vector<T>> saved_cols(static_cast<std::size_t>(n));
  ConstMatMap<T> wm(weight.data().data(), co, patch);
  for (std::int64_t b = 0; b < n; ++b) {
    auto& col = saved_cols[b];
    col.resize(static_cast<std::size_t>(patch * cols));
    const T* x = input.data().data() + b * ci * plane;
    for (std::int64_t c = 0; c < ci; ++c)
      for (std::int64_t t = 0; t < taps; ++t) {
        T* row = col.data() + (c * taps + t) * cols;
        const auto* st = stencils.data() + (b * taps + t) * cols;
        for (std::int64_t pos = 0; pos < cols; ++pos) row[pos] = read_stencil(st[pos], x + c * plane);
      }
    MatMap<T> ym(out.data() + b * co * cols, co, cols);
    ym.noalias() = wm * ConstMatMap<T>(col.data(), patch, cols);
    if (bias.defined()) {
      for (std::int64_t o = 0; o < co; ++o) ym.row(o).array() += bias.data()[o];
    }
  }

  return make_op_result<T>(
      op, Shape{n, co, oh, ow}, std::move(out),
      {input, offsets, weight, bias.defined() ? bias : BasicTensor<T>::scalar(0)},
      [=, stencils = std::move(stencils), saved_cols = std::move(saved_cols)](
          std::span<const T> g, std::span<std::vector<T>*> grads) {
        ConstMatMap<T> wm(weight.data().data(), co, patch);
        std::vector<T> dcol(static_cast<std::size_t>(patch * cols));
        for (std::int64_t b = 0; b < n; ++b) {
          ConstMatMap<T> gm(g.data() + b * co * cols, co, cols);
          if (auto* gw = grads[2]) {
            MatMap<T>(gw->data(), co, patch).noalias() +=
                gm * ConstMatMap<T>(saved_cols[b].data(), patch, cols).transpose();
          }
          if (auto* gb = grads[3]; gb && bias.defined()) {
            for (std::int64_t o = 0; o < co; ++o) (*gb)[o] += ordered_sum(gm.data() + o * cols, cols);
          }
          if (!grads[0] && !grads[1]) continue;
          MatMap<T>(dcol.data(), patch, cols).noalias() = wm.transpose() * gm;
          const T* x = input.data().data() + b * ci * plane;
          for (std::int64_t t = 0; t < taps; ++t) {
            const auto* st = stencils.data() + (b * taps + t) * cols;
            T* gdy = grads[1] ? grads[1]->data() + (b * 2 * taps + 2 * t) * cols : nullptr;
            T* gdx = gdy ? gdy + cols : nullptr;
            for (std::int64_t c = 0; c < ci; ++c) {
              const T* drow = dcol.data() + (c * taps + t) * cols;
              const T* xp = x + c * plane;
              T* gx = grads[0] ? grads[0]->data() + (b * ci + c) * plane : nullptr;
              for (std::int64_t pos = 0; pos < cols; ++pos) {
                const T d = drow[pos];
                const auto& sp = st[pos];
                for (int q = 0; q < 4; ++q) {
                  const auto idx = sp.index[q];
                  if (idx < 0) continue;
                  if (gx) gx[idx] += sp.weight[q] * d;
                  if (gdy) {
                    gdy[pos] += sp.d_dy[q] * xp[idx] * d;
                    gdx[pos] += sp.d_dx[q] * xp[idx] * d;
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
DeformableConvParams<T> DeformableConvParams<T>::create(ParameterStore<T>& store, const std::string& prefix,
                                                        std::int64_t in_channels, std::int64_t out_channels) {
  DeformableConvParams p;
  p.weight = store.add(prefix + ".weight", {out_channels, in_channels, 3, 3}, Init::he(in_channels * 9));
  p.bias = store.add(prefix + ".bias", {out_channels}, Init::zeros());
  p.offset_weight = store.add(prefix + ".offset_conv.weight", {18, in_channels, 3, 3}, Init::zeros());
  p.offset_bias = store.add(prefix + ".offset_conv.bias", {18}, Init::zeros());
  return p;
}

template <typename T>
void DeformableConvParams<T>::validate() const {
  if (offset_weight.dim(0) != 2 * weight.dim(2) * weight.dim(3)) {
    throw ConfigError("deformable conv: offset predictor must output " +
                      std::to_string(2 * weight.dim(2) * weight.dim(3)) + " channels, has " +
                      std::to_string(offset_weight.dim(0)));
  }
  if (offset_weight.dim(1) != weight.dim(1)) {
    throw ConfigError("deformable conv: offset predictor input channels differ from the kernel's");
  }
}

template <typename T>
BasicTensor<T> deformable_conv2d(const BasicTensor<T>& input, const DeformableConvParams<T>& params) {
  params.validate();
  const ops::Conv2dOptions opts{params.stride, params.padding};
  const auto offsets = ops::conv2d(input, params.offset_weight, params.offset_bias, opts);
  return deformable_conv2d(input, offsets, params.weight, params.bias, opts);
}

template <typename T>
SEParams<T> SEParams<T>::create(ParameterStore<T>& store, const std::string& prefix, std::int64_t channels,
                                std::int64_t reduction) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("SE block: reduction " + std::to_string(reduction) + " does not divide " +
                      std::to_string(channels) + " channels");
  }
  const auto hidden = channels / reduction;
  SEParams p;
  p.reduction = reduction;
  p.w1 = store.add(prefix + ".w1", {hidden, channels}, Init::he(channels));
  p.w2 = store.add(prefix + ".w2", {channels, hidden}, Init::normal(1.0 / std::sqrt(static_cast<double>(hidden))));
  return p;
}

template <typename T>
void SEParams<T>::validate() const {
  const auto c = w1.dim(1);
  if (reduction < 1 || c % reduction != 0) {
    throw ConfigError("SE block: reduction " + std::to_string(reduction) + " does not divide " +
                      std::to_string(c) + " channels");
  }
  if (w1.dim(0) != c / reduction || w2.dim(0) != c || w2.dim(1) != c / reduction) {
    throw ConfigError("SE block: weight shapes " + shape_str(w1.shape()) + " and " + shape_str(w2.shape()) +
                      " inconsistent with reduction " + std::to_string(reduction));
  }
}

template <typename T>
BasicTensor<T> se_squeeze(const BasicTensor<T>& input) {
  if (input.rank() != 4) throw ShapeError("se_squeeze: expected [N,C,H,W], got " + shape_str(input.shape()));
  return ops::reshape(ops::global_avg_pool(input), {input.dim(0), input.dim(1)});
}

template <typename T>
BasicTensor<T> se_excitation(const BasicTensor<T>& squeezed, const SEParams<T>& params) {
  params.validate();
  return ops::sigmoid(ops::linear(ops::relu(ops::linear(squeezed, params.w1)), params.w2));
}

template <typename T>
BasicTensor<T> se_reweight(const BasicTensor<T>& input, const BasicTensor<T>& channel_weights) {
  if (input.rank() != 4 || channel_weights.rank() != 2 || channel_weights.dim(0) != input.dim(0) ||
      channel_weights.dim(1) != input.dim(1)) {
    throw ShapeError("se_reweight: weights " + shape_str(channel_weights.shape()) + " do not match input " +
                     shape_str(input.shape()));
  }
  return ops::mul(input, ops::reshape(channel_weights, {input.dim(0), input.dim(1), 1, 1}));
}

template <typename T>
BasicTensor<T> se_block(const BasicTensor<T>& input, const SEParams<T>& params) {
  if (input.rank() != 4 || input.dim(1) != params.channels()) {
    throw ShapeError("se_block: input " + shape_str(input.shape()) + " does not have " +
                     std::to_string(params.channels()) + " channels");
  }
  return se_reweight(input, se_excitation(se_squeeze(input), params));
}

template <typename T>
LocalAttentionParams<T> LocalAttentionParams<T>::create(ParameterStore<T>& store, const std::string& prefix,
                                                        std::int64_t channels) {
  LocalAttentionParams p;
  p.weight = store.add(prefix + ".weight", {1, channels, 1, 1}, Init::zeros());
  p.bias = store.add(prefix + ".bias", {1}, Init::zeros());
  return p;
}

template <typename T>
BasicTensor<T> local_attention(const BasicTensor<T>& input, const LocalAttentionParams<T>& params) {
  if (input.rank() != 4 || params.weight.rank() != 4 || params.weight.dim(0) != 1 ||
      params.weight.dim(1) != input.dim(1) || params.weight.dim(2) != 1) {
    throw ShapeError("local_attention: gate weight " + shape_str(params.weight.shape()) +
                     " is not a 1x1 conv from the channels of " + shape_str(input.shape()));
  }
  const auto gate = ops::sigmoid(ops::conv2d(input, params.weight, params.bias));
  return ops::mul(input, gate);
}

template <typename T>
DSEBlockParams<T> DSEBlockParams<T>::create(ParameterStore<T>& store, const std::string& prefix,
                                            std::int64_t channels, std::int64_t se_reduction) {
  if (channels < 2 || channels % 2 != 0) {
    throw ConfigError("DSE block: channel count must be even, got " + std::to_string(channels));
  }
  const auto mid = channels / 2;
  DSEBlockParams p;
  p.channels = channels;
  p.entry_weight = store.add(prefix + ".entry.weight", {mid, channels, 1, 1}, Init::he(channels));
  p.entry_bias = store.add(prefix + ".entry.bias", {mid}, Init::zeros());
  p.deform = DeformableConvParams<T>::create(store, prefix + ".deform", mid, mid);
  p.exit_weight = store.add(prefix + ".exit.weight", {channels, mid, 1, 1}, Init::he(mid));
  p.exit_bias = store.add(prefix + ".exit.bias", {channels}, Init::zeros());
  p.se = SEParams<T>::create(store, prefix + ".se", channels, se_reduction);
  p.local = LocalAttentionParams<T>::create(store, prefix + ".local", channels);
  return p;
}

template <typename T>
std::vector<BasicTensor<T>> DSEBlockParams<T>::tensors() const {
  return {entry_weight, entry_bias, deform.weight, deform.bias, deform.offset_weight, deform.offset_bias,
          exit_weight,  exit_bias,  se.w1,         se.w2,        local.weight,         local.bias};
}

template <typename T>
BasicTensor<T> dse_block(const BasicTensor<T>& input, const DSEBlockParams<T>& params) {
  if (input.rank() != 4 || input.dim(1) != params.channels) {
    throw ShapeError("dse_block: input " + shape_str(input.shape()) + " does not match block width " +
                     std::to_string(params.channels));
  }
  auto f = ops::relu(ops::conv2d(input, params.entry_weight, params.entry_bias));
  f = deformable_conv2d(f, params.deform);
  f = ops::conv2d(f, params.exit_weight, params.exit_bias);
  return ops::add(input, local_attention(se_block(f, params.se), params.local));
}

#define PDSE_INSTANTIATE(T)                                                                              \
  template BilinearStencil<T> bilinear_stencil<T>(std::int64_t, std::int64_t, T, T);                     \
  template std::vector<T> bilinear_sample<T>(const BasicTensor<T>&, T, T);                               \
  template BasicTensor<T> sample_points<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> deformable_conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                               const BasicTensor<T>&, const BasicTensor<T>&,             \
                                               ops::Conv2dOptions);                                      \
  template BasicTensor<T> deformable_conv2d<T>(const BasicTensor<T>&, const DeformableConvParams<T>&);   \
  template BasicTensor<T> se_squeeze<T>(const BasicTensor<T>&);                                          \
  template BasicTensor<T> se_excitation<T>(const BasicTensor<T>&, const SEParams<T>&);                   \
  template BasicTensor<T> se_reweight<T>(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> se_block<T>(const BasicTensor<T>&, const SEParams<T>&);                        \
  template BasicTensor<T> local_attention<T>(const BasicTensor<T>&, const LocalAttentionParams<T>&);     \
  template BasicTensor<T> dse_block<T>(const BasicTensor<T>&, const DSEBlockParams<T>&);                 \
  template struct DeformableConvParams<T>;                                                               \
  template struct SEParams<T>;                                                                           \
  template struct LocalAttentionParams<T>;                                                               \
  template struct DSEBlockParams<T>;

PDSE_INSTANTIATE(float)
PDSE_INSTANTIATE(double)
#undef PDSE_INSTANTIATE

}  // namespace pdse

#include "uavd/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "uavd/kernels.hpp"
#include "uavd/parallel.hpp"

namespace uavd {

namespace {

using Dims4 = std::array<Index, 4>;

Dims4 pad4(const Shape& s) {
  Dims4 d{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) d[off + i] = s[i];
  return d;
}

// Element strides with 0 on broadcast axes.
Dims4 broadcast_strides(const Dims4& in, const Dims4& out) {
  Dims4 st{};
  Index acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = (in[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= in[i];
  }
  return st;
}

template <typename F>
void for_each_broadcast(const Dims4& out, const Dims4& sa, const Dims4& sb, F&& f) {
  Index o = 0;
  for (Index i0 = 0; i0 < out[0]; ++i0)
    for (Index i1 = 0; i1 < out[1]; ++i1)
      for (Index i2 = 0; i2 < out[2]; ++i2) {
        const Index ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        const Index bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (Index i3 = 0; i3 < out[3]; ++i3, ++o) f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
      }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
void accumulate(Node<T>& input, std::span<const T> g) {
  if (!input.requires_grad) return;
  auto& buf = input.grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

const char* op_name(PointwiseOp op) {
  switch (op) {
    case PointwiseOp::add: return "add";
    case PointwiseOp::sub: return "sub";
    case PointwiseOp::mul: return "mul";
    case PointwiseOp::safe_div: return "safe_div";
    case PointwiseOp::sigmoid: return "sigmoid";
    case PointwiseOp::silu: return "silu";
    case PointwiseOp::exp: return "exp";
    case PointwiseOp::softplus: return "softplus";
  }
  return "?";
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ConfigError(std::string(what) + " expects a rank-4 input, got " + to_string(s));
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ConfigError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

template <typename T>
Tensor<T> pointwise(PointwiseOp op, const Tensor<T>& a, const Tensor<T>& b, T eps) {
  const bool binary = op == PointwiseOp::add || op == PointwiseOp::sub || op == PointwiseOp::mul ||
                      op == PointwiseOp::safe_div;
  if (!binary) {
    const auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (op) {
        case PointwiseOp::sigmoid: out[i] = sigmoid_scalar(x[i]); break;
        case PointwiseOp::silu: out[i] = x[i] * sigmoid_scalar(x[i]); break;
        case PointwiseOp::exp: out[i] = std::exp(x[i]); break;
        default: out[i] = softplus_scalar(x[i]); break;
      }
    }
    return make_result<T>(a.shape(), std::move(out), op_name(op), {a}, [op](Node<T>& self) {
      Node<T>& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = in.value[i];
        T d;
        switch (op) {
          case PointwiseOp::sigmoid: d = self.value[i] * (T(1) - self.value[i]); break;
          case PointwiseOp::silu: {
            const T s = sigmoid_scalar(x);
            d = s * (T(1) + x * (T(1) - s));
            break;
          }
          case PointwiseOp::exp: d = self.value[i]; break;
          default: d = sigmoid_scalar(x); break;
        }
        g[i] += self.grad[i] * d;
      }
    });
  }

  if (!b.defined()) throw ConfigError(std::string(op_name(op)) + " needs two operands");
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Dims4 out4 = pad4(out_shape);
  const Dims4 sa = broadcast_strides(pad4(a.shape()), out4);
  const Dims4 sb = broadcast_strides(pad4(b.shape()), out4);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  for_each_broadcast(out4, sa, sb, [&](Index o, Index ia, Index ib) {
    switch (op) {
      case PointwiseOp::add: out[o] = x[ia] + y[ib]; break;
      case PointwiseOp::sub: out[o] = x[ia] - y[ib]; break;
      case PointwiseOp::mul: out[o] = x[ia] * y[ib]; break;
      default: out[o] = x[ia] / (y[ib] + eps); break;
    }
  });
  return make_result<T>(out_shape, std::move(out), op_name(op), {a, b},
                        [op, out4, sa, sb, eps](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    T* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
    T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    const T* x = na.value.data();
    const T* y = nb.value.data();
    for_each_broadcast(out4, sa, sb, [&](Index o, Index ia, Index ib) {
      const T g = self.grad[o];
      switch (op) {
        case PointwiseOp::add:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] += g;
          break;
        case PointwiseOp::sub:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] -= g;
          break;
        case PointwiseOp::mul:
          if (ga) ga[ia] += g * y[ib];
          if (gb) gb[ib] += g * x[ia];
          break;
        default: {
          const T den = y[ib] + eps;
          if (ga) ga[ia] += g / den;
          if (gb) gb[ib] -= g * x[ia] / (den * den);
          break;
        }
      }
    });
  });
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return pointwise(PointwiseOp::add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return pointwise(PointwiseOp::sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return pointwise(PointwiseOp::mul, a, b); }
template <typename T> Tensor<T> safe_div(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  return pointwise(PointwiseOp::safe_div, a, b, eps);
}
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return pointwise(PointwiseOp::sigmoid, a); }
template <typename T> Tensor<T> silu(const Tensor<T>& a) { return pointwise(PointwiseOp::silu, a); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return pointwise(PointwiseOp::exp, a); }
template <typename T> Tensor<T> softplus(const Tensor<T>& a) { return pointwise(PointwiseOp::softplus, a); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  return make_result<T>(a.shape(), std::move(out), "scale", {a}, [factor](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Index stride, Index padding) {
  require_rank4(input.shape(), "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(1) != input.dim(1)) {
    throw ConfigError("conv2d shape mismatch: input " + to_string(input.shape()) + ", weight " +
                      to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw ConfigError("conv2d bias " + to_string(bias.shape()) + " does not match weight " +
                      to_string(weight.shape()));
  }
  kernels::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                          weight.dim(0), weight.dim(2), stride, padding};
  kernels::validate(g);
  const Shape out_shape{g.batch, g.out_channels, g.out_height(), g.out_width()};
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  kernels::parallel::conv2d_forward<T>(g, input.data(), weight.data(),
                                       bias.defined() ? bias.data() : std::span<const T>{}, out);
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "conv2d", std::move(inputs), [g](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& w = *self.inputs[1];
    std::span<T> gi, gw, gb;
    if (in.requires_grad) gi = in.grad_buffer();
    if (w.requires_grad) gw = w.grad_buffer();
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) gb = self.inputs[2]->grad_buffer();
    kernels::parallel::conv2d_backward<T>(g, in.value, w.value, self.grad, gi, gw, gb);
  });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           Index padding) {
  require_rank4(input.shape(), "depthwise_conv2d");
  const Index B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (weight.rank() != 4 || weight.dim(0) != C || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3)) {
    throw ConfigError("depthwise_conv2d shape mismatch: input " + to_string(input.shape()) +
                      ", weight " + to_string(weight.shape()));
  }
  const Index K = weight.dim(2);
  kernels::ConvGeometry g{B, 1, H, W, 1, K, 1, padding};
  kernels::validate(g);
  const Index Ho = g.out_height(), Wo = g.out_width();
  const Shape out_shape{B, C, Ho, Wo};
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* bs = bias.defined() ? bias.data().data() : nullptr;
  parallel_for(0, B * C, [&](Index bc) {
    const Index c = bc % C;
    const T* src = x + bc * H * W;
    T* dst = out.data() + bc * Ho * Wo;
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        T acc = bs ? bs[c] : T(0);
        for (Index ky = 0; ky < K; ++ky) {
          const Index iy = oy - padding + ky;
          if (iy < 0 || iy >= H) continue;
          for (Index kx = 0; kx < K; ++kx) {
            const Index ix = ox - padding + kx;
            if (ix < 0 || ix >= W) continue;
            acc += w[(c * K + ky) * K + kx] * src[iy * W + ix];
          }
        }
        dst[oy * Wo + ox] = acc;
      }
  });
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "depthwise_conv2d", std::move(inputs),
                        [B, C, H, W, K, Ho, Wo, padding](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& wt = *self.inputs[1];
    T* gi = in.requires_grad ? in.grad_buffer().data() : nullptr;
    T* gw = wt.requires_grad ? wt.grad_buffer().data() : nullptr;
    T* gb = (self.inputs.size() > 2 && self.inputs[2]->requires_grad) ? self.inputs[2]->grad_buffer().data() : nullptr;
    // Parallel over channels; the batch loop inside keeps weight sums ordered.
    parallel_for(0, C, [&](Index c) {
      for (Index b = 0; b < B; ++b) {
        const Index bc = b * C + c;
        const T* src = in.value.data() + bc * H * W;
        const T* go = self.grad.data() + bc * Ho * Wo;
        T* dsrc = gi ? gi + bc * H * W : nullptr;
        for (Index oy = 0; oy < Ho; ++oy)
          for (Index ox = 0; ox < Wo; ++ox) {
            const T g = go[oy * Wo + ox];
            if (gb) gb[c] += g;
            for (Index ky = 0; ky < K; ++ky) {
              const Index iy = oy - padding + ky;
              if (iy < 0 || iy >= H) continue;
              for (Index kx = 0; kx < K; ++kx) {
                const Index ix = ox - padding + kx;
                if (ix < 0 || ix >= W) continue;
                const Index wi = (c * K + ky) * K + kx;
                if (gw) gw[wi] += g * src[iy * W + ix];
                if (dsrc) dsrc[iy * W + ix] += g * wt.value[wi];
              }
            }
          }
      }
    });
  });
}

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& input) {
  const auto x = input.data();
  if (op == ReduceOp::sum_all || op == ReduceOp::mean_all) {
    T s = T(0);
    for (T v : x) s += v;
    const T factor = op == ReduceOp::mean_all ? T(1) / static_cast<T>(x.size()) : T(1);
    return make_result<T>({1}, {s * factor}, op == ReduceOp::sum_all ? "sum_all" : "mean_all", {input},
                          [factor](Node<T>& self) {
      Node<T>& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.grad_buffer();
      const T v = self.grad[0] * factor;
      for (T& gi : g) gi += v;
    });
  }
  require_rank4(input.shape(), "reduce");
  const Index B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3), P = H * W;
  if (op == ReduceOp::max_channel || op == ReduceOp::mean_channel) {
    std::vector<T> out(static_cast<std::size_t>(B * P));
    std::vector<Index> arg(op == ReduceOp::max_channel ? out.size() : 0);
    for (Index b = 0; b < B; ++b)
      for (Index p = 0; p < P; ++p) {
        T best = x[(b * C) * P + p];
        Index best_c = 0;
        T sum = T(0);
        for (Index c = 0; c < C; ++c) {
          const T v = x[(b * C + c) * P + p];
          sum += v;
          if (v > best) {
            best = v;
            best_c = c;
          }
        }
        if (op == ReduceOp::max_channel) {
          out[b * P + p] = best;
          arg[b * P + p] = best_c;
        } else {
          out[b * P + p] = sum / static_cast<T>(C);
        }
      }
    const bool is_max = op == ReduceOp::max_channel;
    return make_result<T>({B, 1, H, W}, std::move(out), is_max ? "max_channel" : "mean_channel", {input},
                          [arg = std::move(arg), is_max, B, C, P](Node<T>& self) {
      Node<T>& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.grad_buffer();
      for (Index b = 0; b < B; ++b)
        for (Index p = 0; p < P; ++p) {
          const T go = self.grad[b * P + p];
          if (is_max) {
            g[(b * C + arg[b * P + p]) * P + p] += go;
          } else {
            for (Index c = 0; c < C; ++c) g[(b * C + c) * P + p] += go / static_cast<T>(C);
          }
        }
    });
  }
  // Global pools over the spatial plane.
  const bool is_max = op == ReduceOp::global_max_pool;
  std::vector<T> out(static_cast<std::size_t>(B * C));
  std::vector<Index> arg(is_max ? out.size() : 0);
  for (Index bc = 0; bc < B * C; ++bc) {
    const T* src = x.data() + bc * P;
    if (is_max) {
      Index best = 0;
      for (Index p = 1; p < P; ++p) {
        if (src[p] > src[best]) best = p;
      }
      out[bc] = src[best];
      arg[bc] = best;
    } else {
      T s = T(0);
      for (Index p = 0; p < P; ++p) s += src[p];
      out[bc] = s / static_cast<T>(P);
    }
  }
  return make_result<T>({B, C, 1, 1}, std::move(out), is_max ? "global_max_pool" : "global_avg_pool",
                        {input}, [arg = std::move(arg), is_max, B, C, P](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (Index bc = 0; bc < B * C; ++bc) {
      if (is_max) {
        g[bc * P + arg[bc]] += self.grad[bc];
      } else {
        const T v = self.grad[bc] / static_cast<T>(P);
        for (Index p = 0; p < P; ++p) g[bc * P + p] += v;
      }
    }
  });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, Index kernel, Index stride, Index padding) {
  require_rank4(input.shape(), "max_pool2d");
  const Index B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  kernels::ConvGeometry g{B, C, H, W, C, kernel, stride, padding};
  kernels::validate(g);
  const Index Ho = g.out_height(), Wo = g.out_width();
  std::vector<T> out(static_cast<std::size_t>(B * C * Ho * Wo));
  std::vector<Index> arg(out.size());
  const T* x = input.data().data();
  parallel_for(0, B * C, [&](Index bc) {
    const T* src = x + bc * H * W;
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        Index best_i = -1;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= W) continue;
            if (best_i < 0 || src[iy * W + ix] > best) {
              best = src[iy * W + ix];
              best_i = iy * W + ix;
            }
          }
        }
        out[(bc * Ho + oy) * Wo + ox] = best;
        arg[(bc * Ho + oy) * Wo + ox] = best_i;
      }
  });
  return make_result<T>({B, C, Ho, Wo}, std::move(out), "max_pool2d", {input},
                        [arg = std::move(arg), B, C, H, W, Ho, Wo](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (Index bc = 0; bc < B * C; ++bc)
      for (Index p = 0; p < Ho * Wo; ++p) g[bc * H * W + arg[bc * Ho * Wo + p]] += self.grad[bc * Ho * Wo + p];
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || input.rank() < 1 || input.dim(-1) != weight.dim(1)) {
    throw ConfigError("linear shape mismatch: input " + to_string(input.shape()) + ", weight " +
                      to_string(weight.shape()));
  }
  const Index din = weight.dim(1), dout = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw ConfigError("linear bias " + to_string(bias.shape()) + " does not match weight " +
                      to_string(weight.shape()));
  }
  const Index rows = input.size() / din;
  Shape out_shape = input.shape();
  out_shape.back() = dout;
  std::vector<T> out(static_cast<std::size_t>(rows * dout));
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* bs = bias.defined() ? bias.data().data() : nullptr;
  parallel_for(0, rows, [&](Index r) {
    const T* xr = x + r * din;
    for (Index o = 0; o < dout; ++o) {
      const T* wo = w + o * din;
      T acc = bs ? bs[o] : T(0);
      for (Index i = 0; i < din; ++i) acc += wo[i] * xr[i];
      out[r * dout + o] = acc;
    }
  });
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "linear", std::move(inputs),
                        [rows, din, dout](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& wt = *self.inputs[1];
    const T* go = self.grad.data();
    if (in.requires_grad) {
      T* gi = in.grad_buffer().data();
      parallel_for(0, rows, [&](Index r) {
        for (Index o = 0; o < dout; ++o) {
          const T g = go[r * dout + o];
          const T* wo = wt.value.data() + o * din;
          for (Index i = 0; i < din; ++i) gi[r * din + i] += g * wo[i];
        }
      });
    }
    if (wt.requires_grad) {
      T* gw = wt.grad_buffer().data();
      parallel_for(0, dout, [&](Index o) {
        for (Index r = 0; r < rows; ++r) {
          const T g = go[r * dout + o];
          const T* xr = in.value.data() + r * din;
          for (Index i = 0; i < din; ++i) gw[o * din + i] += g * xr[i];
        }
      });
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      T* gb = self.inputs[2]->grad_buffer().data();
      for (Index r = 0; r < rows; ++r)
        for (Index o = 0; o < dout; ++o) gb[o] += go[r * dout + o];
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels of nothing");
  for (const auto& p : parts) require_rank4(p.shape(), "concat_channels");
  const Index B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3), P = H * W;
  Index C = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.dim(0) != B || p.dim(2) != H || p.dim(3) != W) {
      throw ConfigError("concat_channels shape mismatch: " + to_string(parts[0].shape()) + " vs " +
                        to_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    C += p.dim(1);
  }
  std::vector<T> out(static_cast<std::size_t>(B * C * P));
  for (Index b = 0; b < B; ++b) {
    Index c0 = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto src = parts[i].data().subspan(static_cast<std::size_t>(b * widths[i] * P),
                                               static_cast<std::size_t>(widths[i] * P));
      std::copy(src.begin(), src.end(), out.begin() + (b * C + c0) * P);
      c0 += widths[i];
    }
  }
  return make_result<T>({B, C, H, W}, std::move(out), "concat_channels", parts,
                        [widths, B, C, P](Node<T>& self) {
    for (Index b = 0; b < B; ++b) {
      Index c0 = 0;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        Node<T>& in = *self.inputs[i];
        if (in.requires_grad) {
          auto& g = in.grad_buffer();
          const T* src = self.grad.data() + (b * C + c0) * P;
          T* dst = g.data() + b * widths[i] * P;
          for (Index j = 0; j < widths[i] * P; ++j) dst[j] += src[j];
        }
        c0 += widths[i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& input, Index start, Index length) {
  const Index d = input.dim(-1);
  if (start < 0 || length < 0 || start + length > d) {
    throw ConfigError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                      ") out of range for " + to_string(input.shape()));
  }
  const Index rows = input.size() / std::max<Index>(d, 1);
  Shape out_shape = input.shape();
  out_shape.back() = length;
  std::vector<T> out(static_cast<std::size_t>(rows * length));
  const auto x = input.data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < length; ++j) out[r * length + j] = x[r * d + start + j];
  return make_result<T>(out_shape, std::move(out), "slice_last", {input}, [rows, d, start, length](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < length; ++j) g[r * d + start + j] += self.grad[r * length + j];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, const Shape& shape) {
  if (numel(shape) != input.size()) {
    throw ConfigError("cannot reshape " + to_string(input.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(input.data().begin(), input.data().end());
  return make_result<T>(shape, std::move(out), "reshape", {input}, [](Node<T>& self) {
    accumulate<T>(*self.inputs[0], self.grad);
  });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
  require_rank4(input.shape(), "upsample_nearest2x");
  const Index B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const Index H2 = 2 * H, W2 = 2 * W;
  std::vector<T> out(static_cast<std::size_t>(B * C * H2 * W2));
  const auto x = input.data();
  for (Index bc = 0; bc < B * C; ++bc)
    for (Index y = 0; y < H2; ++y)
      for (Index xx = 0; xx < W2; ++xx) out[(bc * H2 + y) * W2 + xx] = x[(bc * H + y / 2) * W + xx / 2];
  return make_result<T>({B, C, H2, W2}, std::move(out), "upsample_nearest2x", {input},
                        [B, C, H, W, H2, W2](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (Index bc = 0; bc < B * C; ++bc)
      for (Index y = 0; y < H2; ++y)
        for (Index xx = 0; xx < W2; ++xx) g[(bc * H + y / 2) * W + xx / 2] += self.grad[(bc * H2 + y) * W2 + xx];
  });
}

template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps) {
  require_rank4(input.shape(), "layer_norm_channels");
  const Index B = input.dim(0), C = input.dim(1), P = input.dim(2) * input.dim(3);
  if (gamma.size() != C || beta.size() != C) {
    throw ConfigError("layer norm affine size " + to_string(gamma.shape()) + " does not match " +
                      to_string(input.shape()));
  }
  const auto x = input.data();
  const auto ga = gamma.data();
  const auto be = beta.data();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(static_cast<std::size_t>(B * P));
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < P; ++p) {
      T mean = T(0);
      for (Index c = 0; c < C; ++c) mean += x[(b * C + c) * P + p];
      mean /= static_cast<T>(C);
      T var = T(0);
      for (Index c = 0; c < C; ++c) {
        const T d = x[(b * C + c) * P + p] - mean;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[b * P + p] = is;
      for (Index c = 0; c < C; ++c) {
        const Index i = (b * C + c) * P + p;
        xhat[i] = (x[i] - mean) * is;
        out[i] = xhat[i] * ga[c] + be[c];
      }
    }
  return make_result<T>(input.shape(), std::move(out), "layer_norm_channels", {input, gamma, beta},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, P](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& ng = *self.inputs[1];
    Node<T>& nb = *self.inputs[2];
    T* gi = in.requires_grad ? in.grad_buffer().data() : nullptr;
    T* gg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
    T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    const T* go = self.grad.data();
    for (Index b = 0; b < B; ++b)
      for (Index p = 0; p < P; ++p) {
        T sum_g = T(0), sum_gx = T(0);
        for (Index c = 0; c < C; ++c) {
          const Index i = (b * C + c) * P + p;
          const T gxh = go[i] * ng.value[c];
          sum_g += gxh;
          sum_gx += gxh * xhat[i];
          if (gg) gg[c] += go[i] * xhat[i];
          if (gb) gb[c] += go[i];
        }
        if (!gi) continue;
        const T is = inv_std[b * P + p];
        const T inv_c = T(1) / static_cast<T>(C);
        for (Index c = 0; c < C; ++c) {
          const Index i = (b * C + c) * P + p;
          const T gxh = go[i] * ng.value[c];
          gi[i] += is * (gxh - inv_c * sum_g - xhat[i] * inv_c * sum_gx);
        }
      }
  });
}

#define UAVD_INSTANTIATE(T)                                                                       \
  template Tensor<T> pointwise<T>(PointwiseOp, const Tensor<T>&, const Tensor<T>&, T);            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> safe_div<T>(const Tensor<T>&, const Tensor<T>&, T);                          \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                   \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                    \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index); \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index); \
  template Tensor<T> reduce<T>(ReduceOp, const Tensor<T>&);                                       \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, Index, Index, Index);                        \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> slice_last<T>(const Tensor<T>&, Index, Index);                               \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                                     \
  template Tensor<T> layer_norm_channels<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd

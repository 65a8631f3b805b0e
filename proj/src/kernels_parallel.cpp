// Column-buffer kernels, OpenMP-parallel over independent output rows.

#include <algorithm>
#include <cmath>
#include <vector>

#include "uavd/bilinear.hpp"
#include "uavd/kernels.hpp"
#include "uavd/parallel.hpp"

namespace uavd::kernels::parallel {

namespace {

template <typename T>
bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

// col[(ci*K + ky)*K + kx, oy*wo + ox] = input[ci, oy*s - p + ky, ox*s - p + kx]
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> image, std::vector<T>& col) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  col.assign(static_cast<std::size_t>(g.in_channels * g.taps() * pix), T(0));
  parallel_for(0, g.in_channels, [&](Index ci) {
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((ci * k + ky) * k + kx) * pix;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = image.data() + (ci * g.height + iy) * g.width;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) row[oy * wo + ox] = src[ix];
          }
        }
      }
  });
}

template <typename T>
void col2im(const ConvGeometry& g, const std::vector<T>& col, std::span<T> image) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  parallel_for(0, g.in_channels, [&](Index ci) {
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((ci * k + ky) * k + kx) * pix;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = image.data() + (ci * g.height + iy) * g.width;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += row[oy * wo + ox];
          }
        }
      }
  });
}

// out[co, :] = bias[co] + sum_k weight[co, k] * col[k, :]
template <typename T>
void gemm_forward(Index cout, Index rows, Index pix, const T* weight, std::span<const T> bias,
                  const T* col, T* out) {
  parallel_for(0, cout, [&](Index co) {
    T* o = out + co * pix;
    const T b0 = bias.empty() ? T(0) : bias[co];
    for (Index p = 0; p < pix; ++p) o[p] = b0;
    const T* w = weight + co * rows;
    for (Index r = 0; r < rows; ++r) {
      const T wr = w[r];
      const T* c = col + r * pix;
      for (Index p = 0; p < pix; ++p) o[p] += wr * c[p];
    }
  });
}

// grad_weight[co, k] += sum_p grad_out[co, p] * col[k, p]; grad_bias[co] += sum_p grad_out[co, p]
template <typename T>
void gemm_grad_weight(Index cout, Index rows, Index pix, const T* grad_out, const T* col,
                      std::span<T> grad_weight, std::span<T> grad_bias) {
  parallel_for(0, cout, [&](Index co) {
    const T* go = grad_out + co * pix;
    if (!grad_bias.empty()) {
      T s = T(0);
      for (Index p = 0; p < pix; ++p) s += go[p];
      grad_bias[co] += s;
    }
    if (!grad_weight.empty()) {
      for (Index r = 0; r < rows; ++r) {
        const T* c = col + r * pix;
        T s = T(0);
        for (Index p = 0; p < pix; ++p) s += go[p] * c[p];
        grad_weight[co * rows + r] += s;
      }
    }
  });
}

// dcol[k, p] = sum_co weight[co, k] * grad_out[co, p]
template <typename T>
void gemm_grad_col(Index cout, Index rows, Index pix, const T* weight, const T* grad_out,
                   std::vector<T>& dcol) {
  dcol.assign(static_cast<std::size_t>(rows * pix), T(0));
  parallel_for(0, rows, [&](Index r) {
    T* d = dcol.data() + r * pix;
    for (Index co = 0; co < cout; ++co) {
      const T w = weight[co * rows + r];
      const T* go = grad_out + co * pix;
      for (Index p = 0; p < pix; ++p) d[p] += w * go[p];
    }
  });
}

template <typename T>
void deform_im2col(const ConvGeometry& g, std::span<const T> image, std::span<const T> offsets,
                   std::vector<T>& col) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  const Index plane = g.height * g.width;
  col.assign(static_cast<std::size_t>(g.in_channels * g.taps() * pix), T(0));
  parallel_for(0, g.in_channels, [&](Index ci) {
    auto src = image.subspan(static_cast<std::size_t>(ci * plane), static_cast<std::size_t>(plane));
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Index t = ky * k + kx;
        const T* off_y = offsets.data() + (2 * t) * pix;
        const T* off_x = offsets.data() + (2 * t + 1) * pix;
        T* row = col.data() + ((ci * k + ky) * k + kx) * pix;
        for (Index oy = 0; oy < ho; ++oy)
          for (Index ox = 0; ox < wo; ++ox) {
            const Index p = oy * wo + ox;
            const T y = static_cast<T>(oy * g.stride - g.padding + ky) + off_y[p];
            const T x = static_cast<T>(ox * g.stride - g.padding + kx) + off_x[p];
            row[p] = bilinear_sample<T>(src, g.height, g.width, y, x);
          }
      }
  });
}


// Stride-1 convolutions as shifted row accumulations, avoiding the column buffer.
struct RowSpan {
  Index lo, hi, shift;  // valid output columns [lo, hi); input column = ox + shift
};

inline RowSpan row_span(const ConvGeometry& g, Index kx) {
  const Index wo = g.out_width(), shift = kx - g.padding;
  return {std::max<Index>(0, -shift), std::min<Index>(wo, g.width - shift), shift};
}

template <typename T>
void direct_forward(const ConvGeometry& g, const T* image, const T* weight, std::span<const T> bias, T* out) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  parallel_for(0, g.out_channels, [&](Index co) {
    T* o = out + co * pix;
    const T b0 = bias.empty() ? T(0) : bias[co];
    for (Index p = 0; p < pix; ++p) o[p] = b0;
    for (Index ci = 0; ci < g.in_channels; ++ci)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const T w = weight[((co * g.in_channels + ci) * k + ky) * k + kx];
          const RowSpan r = row_span(g, kx);
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            const T* src = image + (ci * g.height + iy) * g.width + r.shift;
            T* dst = o + oy * wo;
            for (Index ox = r.lo; ox < r.hi; ++ox) dst[ox] += w * src[ox];
          }
        }
  });
}

template <typename T>
void direct_grad_weight(const ConvGeometry& g, const T* image, const T* grad_out, std::span<T> grad_weight) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  parallel_for(0, g.out_channels, [&](Index co) {
    const T* go = grad_out + co * pix;
    for (Index ci = 0; ci < g.in_channels; ++ci)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const RowSpan r = row_span(g, kx);
          T s = T(0);
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            const T* src = image + (ci * g.height + iy) * g.width + r.shift;
            const T* gr = go + oy * wo;
            for (Index ox = r.lo; ox < r.hi; ++ox) s += gr[ox] * src[ox];
          }
          grad_weight[((co * g.in_channels + ci) * k + ky) * k + kx] += s;
        }
  });
}

template <typename T>
void direct_grad_input(const ConvGeometry& g, const T* weight, const T* grad_out, T* grad_image) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  parallel_for(0, g.in_channels, [&](Index ci) {
    for (Index co = 0; co < g.out_channels; ++co) {
      const T* go = grad_out + co * pix;
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const T w = weight[((co * g.in_channels + ci) * k + ky) * k + kx];
          const RowSpan r = row_span(g, kx);
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            T* dst = grad_image + (ci * g.height + iy) * g.width + r.shift;
            const T* gr = go + oy * wo;
            for (Index ox = r.lo; ox < r.hi; ++ox) dst[ox] += w * gr[ox];
          }
        }
    }
  });
}

template <typename T>
bool use_direct(const ConvGeometry& g) {
  return g.stride == 1 && g.kernel > 1;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const Index pix = g.out_height() * g.out_width();
  const Index rows = g.in_channels * g.taps();
  const Index in_plane = g.in_channels * g.height * g.width;
  std::vector<T> col;
  for (Index b = 0; b < g.batch; ++b) {
    const T* col_ptr;
    auto image = input.subspan(static_cast<std::size_t>(b * in_plane), static_cast<std::size_t>(in_plane));
    if (use_direct<T>(g)) {
      direct_forward(g, image.data(), weight.data(), bias, out.data() + b * g.out_channels * pix);
      continue;
    }
    if (is_pointwise<T>(g)) {
      col_ptr = image.data();
    } else {
      im2col(g, image, col);
      col_ptr = col.data();
    }
    gemm_forward(g.out_channels, rows, pix, weight.data(), bias, col_ptr,
                 out.data() + b * g.out_channels * pix);
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  const Index pix = g.out_height() * g.out_width();
  const Index rows = g.in_channels * g.taps();
  const Index in_plane = g.in_channels * g.height * g.width;
  std::vector<T> col, dcol;
  for (Index b = 0; b < g.batch; ++b) {
    auto image = input.subspan(static_cast<std::size_t>(b * in_plane), static_cast<std::size_t>(in_plane));
    const T* go = grad_out.data() + b * g.out_channels * pix;
    if (use_direct<T>(g)) {
      if (!grad_weight.empty()) direct_grad_weight(g, image.data(), go, grad_weight);
      if (!grad_bias.empty()) gemm_grad_weight<T>(g.out_channels, 0, pix, go, nullptr, {}, grad_bias);
      if (!grad_input.empty()) direct_grad_input(g, weight.data(), go, grad_input.data() + b * in_plane);
      continue;
    }
    if (!grad_weight.empty() || !grad_bias.empty()) {
      const T* col_ptr = image.data();
      if (!is_pointwise<T>(g) && !grad_weight.empty()) {
        im2col(g, image, col);
        col_ptr = col.data();
      }
      gemm_grad_weight(g.out_channels, rows, pix, go, col_ptr, grad_weight, grad_bias);
    }
    if (!grad_input.empty()) {
      gemm_grad_col(g.out_channels, rows, pix, weight.data(), go, dcol);
      auto dst = grad_input.subspan(static_cast<std::size_t>(b * in_plane), static_cast<std::size_t>(in_plane));
      if (is_pointwise<T>(g)) {
        for (Index i = 0; i < in_plane; ++i) dst[i] += dcol[i];
      } else {
        col2im(g, dcol, dst);
      }
    }
  }
}

template <typename T>
void deform_conv2d_forward(const ConvGeometry& g, std::span<const T> input,
                           std::span<const T> weight, std::span<const T> bias,
                           std::span<const T> offsets, std::span<T> out) {
  const Index pix = g.out_height() * g.out_width();
  const Index rows = g.in_channels * g.taps();
  const Index in_plane = g.in_channels * g.height * g.width;
  const Index off_plane = 2 * g.taps() * pix;
  std::vector<T> col;
  for (Index b = 0; b < g.batch; ++b) {
    deform_im2col(g, input.subspan(b * in_plane, in_plane), offsets.subspan(b * off_plane, off_plane), col);
    gemm_forward(g.out_channels, rows, pix, weight.data(), bias, col.data(),
                 out.data() + b * g.out_channels * pix);
  }
}

template <typename T>
void deform_conv2d_backward(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> weight, std::span<const T> offsets,
                            std::span<const T> grad_out, std::span<T> grad_input,
                            std::span<T> grad_weight, std::span<T> grad_bias,
                            std::span<T> grad_offsets) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, pix = ho * wo;
  const Index rows = g.in_channels * g.taps();
  const Index plane = g.height * g.width;
  const Index in_plane = g.in_channels * plane;
  const Index off_plane = 2 * g.taps() * pix;
  std::vector<T> col, dcol;
  for (Index b = 0; b < g.batch; ++b) {
    auto image = input.subspan(b * in_plane, in_plane);
    auto off = offsets.subspan(b * off_plane, off_plane);
    const T* go = grad_out.data() + b * g.out_channels * pix;
    if (!grad_weight.empty() || !grad_bias.empty()) {
      deform_im2col(g, image, off, col);
      gemm_grad_weight(g.out_channels, rows, pix, go, col.data(), grad_weight, grad_bias);
    }
    if (grad_input.empty() && grad_offsets.empty()) continue;
    gemm_grad_col(g.out_channels, rows, pix, weight.data(), go, dcol);
    auto coord = [&](Index t, Index p, T& y, T& x) {
      const Index oy = p / wo, ox = p % wo, ky = t / k, kx = t % k;
      y = static_cast<T>(oy * g.stride - g.padding + ky) + off[(2 * t) * pix + p];
      x = static_cast<T>(ox * g.stride - g.padding + kx) + off[(2 * t + 1) * pix + p];
    };
    if (!grad_input.empty()) {
      parallel_for(0, g.in_channels, [&](Index ci) {
        auto dst = grad_input.subspan(b * in_plane + ci * plane, plane);
        for (Index t = 0; t < g.taps(); ++t) {
          const T* d = dcol.data() + (ci * g.taps() + t) * pix;
          for (Index p = 0; p < pix; ++p) {
            T y, x;
            coord(t, p, y, x);
            bilinear_scatter<T>(dst, g.height, g.width, y, x, d[p]);
          }
        }
      });
    }
    if (!grad_offsets.empty()) {
      auto dst = grad_offsets.subspan(b * off_plane, off_plane);
      parallel_for(0, g.taps(), [&](Index t) {
        for (Index p = 0; p < pix; ++p) {
          T y, x;
          coord(t, p, y, x);
          T gy = T(0), gx = T(0);
          for (Index ci = 0; ci < g.in_channels; ++ci) {
            const auto s = bilinear_sample_with_grad<T>(image.subspan(ci * plane, plane), g.height, g.width, y, x);
            const T d = dcol[(ci * g.taps() + t) * pix + p];
            gy += d * s.d_y;
            gx += d * s.d_x;
          }
          dst[(2 * t) * pix + p] += gy;
          dst[(2 * t + 1) * pix + p] += gx;
        }
      });
    }
  }
}

template <typename T>
Index selective_scan_forward(const ScanGeometry& g, const ScanInputs<T>& in, std::span<T> y,
                             std::span<T> states) {
  const Index L = g.length, D = g.channels, N = g.state;
  std::vector<Index> bad(static_cast<std::size_t>(g.batch * D), -1);
  parallel_for(0, g.batch * D, [&](Index job) {
    const Index b = job / D, d = job % D;
    std::vector<T> h(static_cast<std::size_t>(N), T(0));
    std::vector<T> a(static_cast<std::size_t>(N));
    for (Index n = 0; n < N; ++n) a[n] = -std::exp(in.a_log[d * N + n]);
    T* st = states.empty() ? nullptr : states.data() + (b * D + d) * L * N;
    for (Index t = 0; t < L; ++t) {
      const Index ud = (b * L + t) * D + d;
      const T dt = in.delta[ud];
      const T x = in.u[ud];
      const T* bt = in.b.data() + (b * L + t) * N;
      const T* ct = in.c.data() + (b * L + t) * N;
      T acc = T(0);
      for (Index n = 0; n < N; ++n) {
        h[n] = std::exp(dt * a[n]) * h[n] + dt * bt[n] * x;
        acc += ct[n] * h[n];
      }
      if (st) std::copy(h.begin(), h.end(), st + t * N);
      y[ud] = acc + in.d_skip[d] * x;
      if (bad[job] < 0 && !std::isfinite(y[ud])) bad[job] = t;
    }
  });
  Index first = -1;
  for (Index t : bad) {
    if (t >= 0 && (first < 0 || t < first)) first = t;
  }
  return first;
}

template <typename T>
void selective_scan_backward(const ScanGeometry& g, const ScanInputs<T>& in,
                             std::span<const T> states, std::span<const T> grad_y,
                             const ScanGrads<T>& grads) {
  const Index B = g.batch, L = g.length, D = g.channels, N = g.state;
  // Per-(b, d) partials for the quantities shared across channels; reduced
  // afterwards in ascending d / b order.
  const bool want_b = !grads.b.empty(), want_c = !grads.c.empty();
  std::vector<T> part_b(want_b ? static_cast<std::size_t>(B * D * L * N) : 0);
  std::vector<T> part_c(want_c ? static_cast<std::size_t>(B * D * L * N) : 0);
  std::vector<T> part_a(static_cast<std::size_t>(B * D * N), T(0));
  std::vector<T> part_d(static_cast<std::size_t>(B * D), T(0));
  const std::vector<T> zeros(static_cast<std::size_t>(N), T(0));
  parallel_for(0, B * D, [&](Index job) {
    const Index b = job / D, d = job % D;
    std::vector<T> carry(static_cast<std::size_t>(N), T(0));
    std::vector<T> a(static_cast<std::size_t>(N));
    std::vector<T> scratch_b(static_cast<std::size_t>(N)), scratch_c(static_cast<std::size_t>(N));
    for (Index n = 0; n < N; ++n) a[n] = -std::exp(in.a_log[d * N + n]);
    const T* st = states.data() + job * L * N;
    T* pa = part_a.data() + job * N;
    const T skip = in.d_skip[d];
    T gd = T(0);
    for (Index t = L - 1; t >= 0; --t) {
      const Index ud = (b * L + t) * D + d;
      const T dt = in.delta[ud];
      const T x = in.u[ud];
      const T gy = grad_y[ud];
      const T* bt = in.b.data() + (b * L + t) * N;
      const T* ct = in.c.data() + (b * L + t) * N;
      const T* h = st + t * N;
      const T* h_prev = t > 0 ? st + (t - 1) * N : zeros.data();
      T* pb = want_b ? part_b.data() + (job * L + t) * N : scratch_b.data();
      T* pc = want_c ? part_c.data() + (job * L + t) * N : scratch_c.data();
      T gu = skip * gy;
      T gdt = T(0);
      gd += gy * x;
      const T dx = dt * x;
      for (Index n = 0; n < N; ++n) {
        const T decay = std::exp(dt * a[n]);
        const T gh = gy * ct[n] + carry[n];
        pc[n] = gy * h[n];
        pb[n] = gh * dx;
        gdt += gh * (a[n] * decay * h_prev[n] + bt[n] * x);
        gu += gh * dt * bt[n];
        pa[n] += gh * dt * decay * h_prev[n];
        carry[n] = gh * decay;
      }
      if (!grads.u.empty()) grads.u[ud] += gu;
      if (!grads.delta.empty()) grads.delta[ud] += gdt;
    }
    part_d[job] = gd;
  });
  if (want_b || want_c) {
    parallel_for(0, B * L, [&](Index bt) {
      const Index b = bt / L, t = bt % L;
      for (Index d = 0; d < D; ++d) {
        const Index src = ((b * D + d) * L + t) * N;
        for (Index n = 0; n < N; ++n) {
          if (want_b) grads.b[bt * N + n] += part_b[src + n];
          if (want_c) grads.c[bt * N + n] += part_c[src + n];
        }
      }
    });
  }
  for (Index b = 0; b < B; ++b)
    for (Index d = 0; d < D; ++d) {
      if (!grads.d_skip.empty()) grads.d_skip[d] += part_d[b * D + d];
      if (!grads.a_log.empty()) {
        for (Index n = 0; n < N; ++n) {
          grads.a_log[d * N + n] += part_a[(b * D + d) * N + n] * -std::exp(in.a_log[d * N + n]);
        }
      }
    }
}

#define UAVD_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<const T>, std::span<T>);                          \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>); \
  template void deform_conv2d_forward<T>(const ConvGeometry&, std::span<const T>,             \
                                         std::span<const T>, std::span<const T>,              \
                                         std::span<const T>, std::span<T>);                   \
  template void deform_conv2d_backward<T>(const ConvGeometry&, std::span<const T>,            \
                                          std::span<const T>, std::span<const T>,             \
                                          std::span<const T>, std::span<T>, std::span<T>,     \
                                          std::span<T>, std::span<T>);                        \
  template Index selective_scan_forward<T>(const ScanGeometry&, const ScanInputs<T>&,         \
                                           std::span<T>, std::span<T>);                       \
  template void selective_scan_backward<T>(const ScanGeometry&, const ScanInputs<T>&,         \
                                           std::span<const T>, std::span<const T>,            \
                                           const ScanGrads<T>&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::kernels::parallel

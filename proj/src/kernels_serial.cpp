// Direct nested-loop reference kernels.

#include <cmath>
#include <vector>

#include "uavd/bilinear.hpp"
#include "uavd/kernels.hpp"

namespace uavd::kernels {

void validate(const ConvGeometry& g) {
  if (g.kernel < 1 || g.stride < 1 || g.padding < 0) {
    throw ConfigError("invalid conv geometry: kernel " + std::to_string(g.kernel) + ", stride " +
                      std::to_string(g.stride) + ", padding " + std::to_string(g.padding));
  }
  if (g.height + 2 * g.padding < g.kernel || g.width + 2 * g.padding < g.kernel) {
    throw ConfigError("kernel " + std::to_string(g.kernel) + " larger than padded input " +
                      std::to_string(g.height) + "x" + std::to_string(g.width));
  }
}

namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (Index b = 0; b < g.batch; ++b)
    for (Index co = 0; co < g.out_channels; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (Index ci = 0; ci < g.in_channels; ++ci)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = oy * g.stride - g.padding + ky;
                const Index ix = ox * g.stride - g.padding + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                acc += weight[((co * g.in_channels + ci) * k + ky) * k + kx] *
                       input[((b * g.in_channels + ci) * g.height + iy) * g.width + ix];
              }
          out[((b * g.out_channels + co) * ho + oy) * wo + ox] = acc;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (Index b = 0; b < g.batch; ++b)
    for (Index co = 0; co < g.out_channels; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          const T go = grad_out[((b * g.out_channels + co) * ho + oy) * wo + ox];
          if (!grad_bias.empty()) grad_bias[co] += go;
          for (Index ci = 0; ci < g.in_channels; ++ci)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = oy * g.stride - g.padding + ky;
                const Index ix = ox * g.stride - g.padding + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                const Index wi = ((co * g.in_channels + ci) * k + ky) * k + kx;
                const Index ii = ((b * g.in_channels + ci) * g.height + iy) * g.width + ix;
                if (!grad_weight.empty()) grad_weight[wi] += go * input[ii];
                if (!grad_input.empty()) grad_input[ii] += go * weight[wi];
              }
        }
}

template <typename T>
void deform_conv2d_forward(const ConvGeometry& g, std::span<const T> input,
                           std::span<const T> weight, std::span<const T> bias,
                           std::span<const T> offsets, std::span<T> out) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, taps = g.taps();
  const Index plane = g.height * g.width;
  for (Index b = 0; b < g.batch; ++b)
    for (Index co = 0; co < g.out_channels; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index t = ky * k + kx;
              const T dy = offsets[((b * 2 * taps + 2 * t) * ho + oy) * wo + ox];
              const T dx = offsets[((b * 2 * taps + 2 * t + 1) * ho + oy) * wo + ox];
              const T y = static_cast<T>(oy * g.stride - g.padding + ky) + dy;
              const T x = static_cast<T>(ox * g.stride - g.padding + kx) + dx;
              for (Index ci = 0; ci < g.in_channels; ++ci) {
                auto p = input.subspan(static_cast<std::size_t>((b * g.in_channels + ci) * plane),
                                       static_cast<std::size_t>(plane));
                acc += weight[((co * g.in_channels + ci) * k + ky) * k + kx] *
                       bilinear_sample<T>(p, g.height, g.width, y, x);
              }
            }
          out[((b * g.out_channels + co) * ho + oy) * wo + ox] = acc;
        }
}

template <typename T>
void deform_conv2d_backward(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> weight, std::span<const T> offsets,
                            std::span<const T> grad_out, std::span<T> grad_input,
                            std::span<T> grad_weight, std::span<T> grad_bias,
                            std::span<T> grad_offsets) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel, taps = g.taps();
  const Index plane = g.height * g.width;
  for (Index b = 0; b < g.batch; ++b)
    for (Index co = 0; co < g.out_channels; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          const T go = grad_out[((b * g.out_channels + co) * ho + oy) * wo + ox];
          if (!grad_bias.empty()) grad_bias[co] += go;
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index t = ky * k + kx;
              const Index oy_idx = ((b * 2 * taps + 2 * t) * ho + oy) * wo + ox;
              const Index ox_idx = ((b * 2 * taps + 2 * t + 1) * ho + oy) * wo + ox;
              const T y = static_cast<T>(oy * g.stride - g.padding + ky) + offsets[oy_idx];
              const T x = static_cast<T>(ox * g.stride - g.padding + kx) + offsets[ox_idx];
              for (Index ci = 0; ci < g.in_channels; ++ci) {
                const std::size_t base = static_cast<std::size_t>((b * g.in_channels + ci) * plane);
                auto p = input.subspan(base, static_cast<std::size_t>(plane));
                const Index wi = ((co * g.in_channels + ci) * k + ky) * k + kx;
                const auto s = bilinear_sample_with_grad<T>(p, g.height, g.width, y, x);
                if (!grad_weight.empty()) grad_weight[wi] += go * s.value;
                if (!grad_offsets.empty()) {
                  grad_offsets[oy_idx] += go * weight[wi] * s.d_y;
                  grad_offsets[ox_idx] += go * weight[wi] * s.d_x;
                }
                if (!grad_input.empty()) {
                  bilinear_scatter<T>(grad_input.subspan(base, static_cast<std::size_t>(plane)),
                                      g.height, g.width, y, x, go * weight[wi]);
                }
              }
            }
        }
}

template <typename T>
Index selective_scan_forward(const ScanGeometry& g, const ScanInputs<T>& in, std::span<T> y,
                             std::span<T> states) {
  const Index L = g.length, D = g.channels, N = g.state;
  Index bad_step = -1;
  std::vector<T> h(static_cast<std::size_t>(N));
  for (Index b = 0; b < g.batch; ++b)
    for (Index d = 0; d < D; ++d) {
      std::fill(h.begin(), h.end(), T(0));
      for (Index t = 0; t < L; ++t) {
        const Index ud = (b * L + t) * D + d;
        const T dt = in.delta[ud];
        const T x = in.u[ud];
        T acc = T(0);
        for (Index n = 0; n < N; ++n) {
          const T a = -std::exp(in.a_log[d * N + n]);
          const Index bn = (b * L + t) * N + n;
          h[n] = std::exp(dt * a) * h[n] + dt * in.b[bn] * x;
          if (!states.empty()) states[((b * D + d) * L + t) * N + n] = h[n];
          acc += in.c[bn] * h[n];
        }
        y[ud] = acc + in.d_skip[d] * x;
        if (!std::isfinite(y[ud]) && (bad_step < 0 || t < bad_step)) bad_step = t;
      }
    }
  return bad_step;
}

template <typename T>
void selective_scan_backward(const ScanGeometry& g, const ScanInputs<T>& in,
                             std::span<const T> states, std::span<const T> grad_y,
                             const ScanGrads<T>& grads) {
  const Index L = g.length, D = g.channels, N = g.state;
  std::vector<T> carry(static_cast<std::size_t>(N));
  std::vector<T> grad_a(static_cast<std::size_t>(N));
  for (Index b = 0; b < g.batch; ++b)
    for (Index d = 0; d < D; ++d) {
      std::fill(carry.begin(), carry.end(), T(0));
      std::fill(grad_a.begin(), grad_a.end(), T(0));
      T grad_dskip = T(0);
      for (Index t = L - 1; t >= 0; --t) {
        const Index ud = (b * L + t) * D + d;
        const T dt = in.delta[ud];
        const T x = in.u[ud];
        const T gy = grad_y[ud];
        T gu = in.d_skip[d] * gy;
        T gdt = T(0);
        grad_dskip += gy * x;
        for (Index n = 0; n < N; ++n) {
          const T a = -std::exp(in.a_log[d * N + n]);
          const Index bn = (b * L + t) * N + n;
          const Index si = ((b * D + d) * L + t) * N + n;
          const T h = states[si];
          const T h_prev = t > 0 ? states[si - N] : T(0);
          const T decay = std::exp(dt * a);
          const T gh = gy * in.c[bn] + carry[n];
          if (!grads.c.empty()) grads.c[bn] += gy * h;
          if (!grads.b.empty()) grads.b[bn] += gh * dt * x;
          gdt += gh * (a * decay * h_prev + in.b[bn] * x);
          gu += gh * dt * in.b[bn];
          grad_a[n] += gh * dt * decay * h_prev;
          carry[n] = gh * decay;
        }
        if (!grads.u.empty()) grads.u[ud] += gu;
        if (!grads.delta.empty()) grads.delta[ud] += gdt;
      }
      if (!grads.d_skip.empty()) grads.d_skip[d] += grad_dskip;
      if (!grads.a_log.empty()) {
        for (Index n = 0; n < N; ++n) grads.a_log[d * N + n] += grad_a[n] * -std::exp(in.a_log[d * N + n]);
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

}  // namespace serial
}  // namespace uavd::kernels

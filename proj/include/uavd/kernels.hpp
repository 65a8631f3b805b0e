#pragma once

#include <span>

#include "uavd/tensor.hpp"

// Raw compute kernels behind the differentiable ops. Every kernel exists twice:
// `serial` is the direct nested-loop reference kept for tests and benchmarks,
// `parallel` is the column-buffer / OpenMP version the ops call. Backward
// kernels accumulate (+=) into their outputs; an empty output span is skipped.

namespace uavd::kernels {

struct ConvGeometry {
  Index batch = 1;
  Index in_channels = 1;
  Index height = 1;
  Index width = 1;
  Index out_channels = 1;
  Index kernel = 1;
  Index stride = 1;
  Index padding = 0;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  Index taps() const { return kernel * kernel; }
};

/// Throws ConfigError when the output grid would be empty.
void validate(const ConvGeometry& g);

struct ScanGeometry {
  Index batch = 1;
  Index length = 1;
  Index channels = 1;  // inner width D
  Index state = 1;     // N
};

// Scan layouts: u, delta, y [B, L, D]; b, c [B, L, N]; a_log [D, N];
// d_skip [D]; states [B, D, L, N] (saved for the backward pass).
template <typename T>
struct ScanInputs {
  std::span<const T> u;
  std::span<const T> delta;
  std::span<const T> a_log;
  std::span<const T> b;
  std::span<const T> c;
  std::span<const T> d_skip;
};

template <typename T>
struct ScanGrads {
  std::span<T> u;
  std::span<T> delta;
  std::span<T> a_log;
  std::span<T> b;
  std::span<T> c;
  std::span<T> d_skip;
};

#define UAVD_KERNEL_DECLS                                                                      \
  template <typename T>                                                                        \
  void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, \
                      std::span<const T> bias, std::span<T> out);                              \
  template <typename T>                                                                        \
  void conv2d_backward(const ConvGeometry& g, std::span<const T> input,                        \
                       std::span<const T> weight, std::span<const T> grad_out,                 \
                       std::span<T> grad_input, std::span<T> grad_weight, std::span<T> grad_bias); \
  template <typename T>                                                                        \
  void deform_conv2d_forward(const ConvGeometry& g, std::span<const T> input,                  \
                             std::span<const T> weight, std::span<const T> bias,               \
                             std::span<const T> offsets, std::span<T> out);                    \
  template <typename T>                                                                        \
  void deform_conv2d_backward(const ConvGeometry& g, std::span<const T> input,                 \
                              std::span<const T> weight, std::span<const T> offsets,           \
                              std::span<const T> grad_out, std::span<T> grad_input,            \
                              std::span<T> grad_weight, std::span<T> grad_bias,                \
                              std::span<T> grad_offsets);                                      \
  /* Returns the first time step with a non-finite output, or -1. */                           \
  template <typename T>                                                                        \
  Index selective_scan_forward(const ScanGeometry& g, const ScanInputs<T>& in, std::span<T> y,  \
                               std::span<T> states);                                           \
  template <typename T>                                                                        \
  void selective_scan_backward(const ScanGeometry& g, const ScanInputs<T>& in,                 \
                               std::span<const T> states, std::span<const T> grad_y,           \
                               const ScanGrads<T>& grads);

namespace serial {
UAVD_KERNEL_DECLS
}  // namespace serial

namespace parallel {
UAVD_KERNEL_DECLS
}  // namespace parallel

#undef UAVD_KERNEL_DECLS

}  // namespace uavd::kernels

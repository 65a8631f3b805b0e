#pragma once

#include <string>

#include "uavd/ops.hpp"
#include "uavd/rng.hpp"

// Deformable convolution and deformable tokens: a normal conv branch plus an
// offset-driven bilinear-sampling branch, summed.

namespace uavd::deformable {

/// Offsets [B, 2*K*K, Hout, Wout] in input pixels. For tap t = ky*K + kx,
/// channel 2t holds the row displacement and 2t+1 the column displacement.
template <typename T>
struct OffsetField {
  Tensor<T> offsets;
};

/// Token grid [B, C', H', W']; every spatial site is one token.
template <typename T>
struct TokenMap {
  Tensor<T> tokens;
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;

  static ConvParams from(const ParameterStore<T>& store, const std::string& prefix);
};

struct TokenGeometry {
  Index kernel = 3;
  Index stride = 2;
  Index padding = 1;
};

template <typename T>
struct TokenParams {
  ConvParams<T> norm_conv;
  ConvParams<T> def_conv;
  ConvParams<T> offset_conv;

  /// Reads `<prefix>.norm_conv.*`, `<prefix>.def_conv.*`, `<prefix>.offset_conv.*`.
  static TokenParams from(const ParameterStore<T>& store, const std::string& prefix);
  /// Offset conv starts at zero so the deformable branch begins as a plain conv.
  static void add(ParameterStore<T>& store, const std::string& prefix, Index in_channels,
                  Index out_channels, const TokenGeometry& geom, CounterRng& rng);
};

template <typename T>
OffsetField<T> predict_offsets(const Tensor<T>& input, const ConvParams<T>& offset_conv,
                               const TokenGeometry& geom);

/// Every tap samples input at (base tap position + offset) bilinearly;
/// differentiable in input, weight, bias and offsets.
template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                            const OffsetField<T>& offsets, Index stride, Index padding);

template <typename T>
TokenMap<T> deformable_token(const Tensor<T>& input, const TokenParams<T>& params,
                             const TokenGeometry& geom);

}  // namespace uavd::deformable

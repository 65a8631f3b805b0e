#pragma once

#include <vector>

#include "uavd/tensor.hpp"

// Differentiable primitives. Every op records itself on the graph when
// gradients are enabled and an input requires one.

namespace uavd {

/// Additive denominator stabilizer for safe_div.
inline constexpr double kSafeDivEps = 1e-4;

enum class PointwiseOp { add, sub, mul, safe_div, sigmoid, silu, exp, softplus };

/// Binary kinds broadcast numpy-style (an extent of 1 broadcasts). Unary kinds
/// ignore `b`.
template <typename T>
Tensor<T> pointwise(PointwiseOp op, const Tensor<T>& a, const Tensor<T>& b = {},
                    T eps = T(kSafeDivEps));

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> safe_div(const Tensor<T>& a, const Tensor<T>& b, T eps = T(kSafeDivEps));
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
/// a * factor
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// Broadcast result shape; throws ConfigError when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Index stride, Index padding);

/// Per-channel convolution, weight [C, 1, K, K], stride 1.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           Index padding);

enum class ReduceOp { max_channel, mean_channel, global_avg_pool, global_max_pool, sum_all, mean_all };

/// Channel reductions give [B,1,H,W]; global pools [B,C,1,1]; sum/mean a
/// scalar [1]. Max routes the gradient to the first maximal element.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& input);

template <typename T> Tensor<T> sum_all(const Tensor<T>& input) { return reduce(ReduceOp::sum_all, input); }

/// Max pooling over a -inf padded input, same output arithmetic as conv2d.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, Index kernel, Index stride, Index padding);

/// Affine map over the last axis: weight [Dout, Din], bias [Dout] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Columns [start, start + length) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& input, Index start, Index length);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, const Shape& shape);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input);

/// Normalizes every spatial site of [B,C,H,W] over its C channels, then
/// applies per-channel gamma [C] and beta [C].
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& input, const Tensor<T>& gamma,
                              const Tensor<T>& beta, T eps = T(1e-5));

}  // namespace uavd

#pragma once

#include <string>
#include <string_view>
#include <utility>

#include "uavd/ops.hpp"
#include "uavd/rng.hpp"

// Spatial attention, cross-enhanced spatial attention, channel attention and
// the cross-channel fusion of the two modalities.

namespace uavd::attention {

enum class Modality { rgb, ir };

constexpr std::string_view name(Modality m) { return m == Modality::rgb ? "rgb" : "ir"; }

struct AttentionConfig {
  Index spatial_kernel = 7;  // odd
  Index reduction = 4;
  bool channel_max_pool = false;  // ablation switch: global max instead of average
  double eps = kSafeDivEps;
};

/// [B,1,H,W], values in (0,1).
template <typename T>
struct SpatialAttentionMap {
  Tensor<T> map;
};

/// [B,C,1,1], values in (0,1).
template <typename T>
struct ChannelWeights {
  Tensor<T> weights;
};

/// Conv over the stacked (max, mean) channel planes: weight [1,2,K,K], bias [1].
template <typename T>
struct SpatialParams {
  Tensor<T> weight;
  Tensor<T> bias;

  static SpatialParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index kernel, CounterRng& rng);
};

/// Two-layer MLP C -> C/r -> C with SiLU in between.
template <typename T>
struct ChannelMlpParams {
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  static ChannelMlpParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                  Index reduction, CounterRng& rng);
};

template <typename T>
SpatialAttentionMap<T> spatial_attention(const Tensor<T>& input, const SpatialParams<T>& params);

/// Returns (rgb * A_rgb * A_ir, ir * A_rgb * A_ir) with each map broadcast over
/// channels. Throws AlignmentError when batch or spatial extents differ.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_enhanced_spatial(const Tensor<T>& rgb, const Tensor<T>& ir,
                                                       const SpatialParams<T>& rgb_params,
                                                       const SpatialParams<T>& ir_params);

template <typename T>
ChannelWeights<T> channel_attention(const Tensor<T>& feature, const ChannelMlpParams<T>& mlp,
                                    Index reduction, bool use_max_pool = false);

/// f_rgb * w_rgb / (w_ir + eps) + f_ir * w_ir / (w_rgb + eps).
template <typename T>
Tensor<T> cross_channel_fuse(const Tensor<T>& f_rgb, const Tensor<T>& f_ir,
                             const ChannelWeights<T>& w_rgb, const ChannelWeights<T>& w_ir,
                             T eps = T(kSafeDivEps));

}  // namespace uavd::attention

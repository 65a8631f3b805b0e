#include "uavd/attention.hpp"

#include "uavd/init.hpp"

namespace uavd::attention {

template <typename T>
SpatialParams<T> SpatialParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {store.at(prefix + ".weight"), store.at(prefix + ".bias")};
}

template <typename T>
void SpatialParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index kernel,
                           CounterRng& rng) {
  if (kernel % 2 == 0) throw ConfigError("spatial attention kernel must be odd, got " + std::to_string(kernel));
  add_conv(store, prefix, 1, 2, kernel, rng);
}

template <typename T>
ChannelMlpParams<T> ChannelMlpParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {store.at(prefix + ".fc1.weight"), store.at(prefix + ".fc1.bias"),
          store.at(prefix + ".fc2.weight"), store.at(prefix + ".fc2.bias")};
}

template <typename T>
void ChannelMlpParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                              Index reduction, CounterRng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("channel count " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
  add_linear(store, prefix + ".fc1", channels / reduction, channels, rng);
  add_linear(store, prefix + ".fc2", channels, channels / reduction, rng);
}

template <typename T>
SpatialAttentionMap<T> spatial_attention(const Tensor<T>& input, const SpatialParams<T>& params) {
  const Index k = params.weight.dim(-1);
  if (k % 2 == 0) throw ConfigError("spatial attention kernel must be odd, got " + std::to_string(k));
  const auto stacked = concat_channels<T>({reduce(ReduceOp::max_channel, input),
                                           reduce(ReduceOp::mean_channel, input)});
  return {sigmoid(conv2d(stacked, params.weight, params.bias, 1, (k - 1) / 2))};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_enhanced_spatial(const Tensor<T>& rgb, const Tensor<T>& ir,
                                                       const SpatialParams<T>& rgb_params,
                                                       const SpatialParams<T>& ir_params) {
  if (rgb.rank() != 4 || ir.rank() != 4 || rgb.dim(0) != ir.dim(0) || rgb.dim(2) != ir.dim(2) ||
      rgb.dim(3) != ir.dim(3)) {
    throw AlignmentError("modalities are not aligned: rgb " + to_string(rgb.shape()) + ", ir " +
                         to_string(ir.shape()) + " (resize before fusion)");
  }
  const auto a_rgb = spatial_attention(rgb, rgb_params).map;
  const auto a_ir = spatial_attention(ir, ir_params).map;
  const auto joint = mul(a_rgb, a_ir);
  return {mul(rgb, joint), mul(ir, joint)};
}

template <typename T>
ChannelWeights<T> channel_attention(const Tensor<T>& feature, const ChannelMlpParams<T>& mlp,
                                    Index reduction, bool use_max_pool) {
  const Index B = feature.dim(0), C = feature.dim(1);
  if (reduction < 1 || C % reduction != 0) {
    throw ConfigError("channel count " + std::to_string(C) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
  const auto pooled = reduce(use_max_pool ? ReduceOp::global_max_pool : ReduceOp::global_avg_pool, feature);
  const auto hidden = silu(linear(reshape(pooled, {B, C}), mlp.fc1_weight, mlp.fc1_bias));
  const auto logits = linear(hidden, mlp.fc2_weight, mlp.fc2_bias);
  return {reshape(sigmoid(logits), {B, C, 1, 1})};
}

template <typename T>
Tensor<T> cross_channel_fuse(const Tensor<T>& f_rgb, const Tensor<T>& f_ir,
                             const ChannelWeights<T>& w_rgb, const ChannelWeights<T>& w_ir, T eps) {
  if (f_rgb.shape() != f_ir.shape() || w_rgb.weights.shape() != w_ir.weights.shape() ||
      f_rgb.rank() != 4 || w_rgb.weights.rank() != 4 || w_rgb.weights.dim(0) != f_rgb.dim(0) ||
      w_rgb.weights.dim(1) != f_rgb.dim(1)) {
    throw ConfigError("cross_channel_fuse shape mismatch: features " + to_string(f_rgb.shape()) +
                      " / " + to_string(f_ir.shape()) + ", weights " + to_string(w_rgb.weights.shape()) +
                      " / " + to_string(w_ir.weights.shape()));
  }
  const auto rgb_term = mul(f_rgb, safe_div(w_rgb.weights, w_ir.weights, eps));
  const auto ir_term = mul(f_ir, safe_div(w_ir.weights, w_rgb.weights, eps));
  return add(rgb_term, ir_term);
}

#define UAVD_INSTANTIATE(T)                                                                       \
  template struct SpatialParams<T>;                                                               \
  template struct ChannelMlpParams<T>;                                                            \
  template SpatialAttentionMap<T> spatial_attention<T>(const Tensor<T>&, const SpatialParams<T>&); \
  template std::pair<Tensor<T>, Tensor<T>> cross_enhanced_spatial<T>(                             \
      const Tensor<T>&, const Tensor<T>&, const SpatialParams<T>&, const SpatialParams<T>&);      \
  template ChannelWeights<T> channel_attention<T>(const Tensor<T>&, const ChannelMlpParams<T>&,    \
                                                  Index, bool);                                   \
  template Tensor<T> cross_channel_fuse<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                           const ChannelWeights<T>&, const ChannelWeights<T>&, T);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::attention

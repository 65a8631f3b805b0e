#include <cmath>

#include "uavd/detect.hpp"
#include "uavd/init.hpp"

namespace uavd::detect {

namespace {

template <typename T>
Tensor<T> conv_silu(const Tensor<T>& x, const ParameterStore<T>& store, const std::string& name, Index stride,
                    Index padding) {
  return silu(conv2d(x, store.at(name + ".weight"), store.at(name + ".bias"), stride, padding));
}

template <typename T>
Tensor<T> conv_plain(const Tensor<T>& x, const ParameterStore<T>& store, const std::string& name) {
  return conv2d(x, store.at(name + ".weight"), store.at(name + ".bias"), 1, 0);
}

// 1x1 projection to the block width, then a mamba block.
template <typename T>
Tensor<T> neck_block(const Tensor<T>& x, const ParameterStore<T>& store, const std::string& prefix) {
  const auto projected = conv_silu(x, store, prefix + ".proj", 1, 0);
  return ssm::mamba_block(projected, ssm::MambaParams<T>::from(store, prefix + ".mamba"));
}

template <typename T>
void add_neck_block(ParameterStore<T>& store, const std::string& prefix, Index cin, Index cout,
                    const ssm::SsmConfig& ssm_cfg, CounterRng& rng) {
  add_conv(store, prefix + ".proj", cout, cin, 1, rng);
  ssm::MambaParams<T>::add(store, prefix + ".mamba", cout, ssm_cfg, rng);
}

void check_level(const Shape& deeper, const Shape& shallower, const char* what) {
  if (deeper.size() != 4 || shallower.size() != 4 || deeper[0] != shallower[0] ||
      deeper[2] * 2 != shallower[2] || deeper[3] * 2 != shallower[3]) {
    throw ConfigError(std::string("neck level mismatch (") + what + "): " + to_string(deeper) + " vs " +
                      to_string(shallower));
  }
}

}  // namespace

template <typename T>
Tensor<T> sppf_m(const Tensor<T>& feature, const ParameterStore<T>& store, const std::string& prefix) {
  const auto x1 = conv_silu(feature, store, prefix + ".cv1", 1, 0);
  std::vector<Tensor<T>> parts{x1};
  Tensor<T> pooled = x1;
  for (int i = 1; i <= 3; ++i) {
    pooled = max_pool2d(pooled, 5, 1, 2);
    parts.push_back(ssm::mamba_block(pooled, ssm::MambaParams<T>::from(store, prefix + ".mamba" + std::to_string(i))));
  }
  return conv_silu(concat_channels(parts), store, prefix + ".cv2", 1, 0);
}

template <typename T>
void add_sppf_params(ParameterStore<T>& store, const std::string& prefix, Index channels,
                     const ssm::SsmConfig& ssm_cfg, CounterRng& rng) {
  const Index hidden = std::max<Index>(1, channels / 2);
  add_conv(store, prefix + ".cv1", hidden, channels, 1, rng);
  for (int i = 1; i <= 3; ++i) {
    ssm::MambaParams<T>::add(store, prefix + ".mamba" + std::to_string(i), hidden, ssm_cfg, rng);
  }
  add_conv(store, prefix + ".cv2", channels, 4 * hidden, 1, rng);
}

template <typename T>
network::MultiscaleFeatures<T> dnm_forward(const network::MultiscaleFeatures<T>& features,
                                           const ParameterStore<T>& store) {
  check_level(features.p4.shape(), features.p3.shape(), "p4/p3");
  check_level(features.p3.shape(), features.p2.shape(), "p3/p2");
  const auto p4 = sppf_m(features.p4, store, "neck.sppf");
  const auto t3 = neck_block(concat_channels<T>({upsample_nearest2x(p4), features.p3}), store, "neck.td3");
  const auto t2 = neck_block(concat_channels<T>({upsample_nearest2x(t3), features.p2}), store, "neck.td2");
  const auto d3 = neck_block(concat_channels<T>({conv_silu(t2, store, "neck.down3", 2, 1), t3}), store, "neck.bu3");
  const auto d4 = neck_block(concat_channels<T>({conv_silu(d3, store, "neck.down4", 2, 1), p4}), store, "neck.bu4");
  return {t2, d3, d4};
}

template <typename T>
void add_neck_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng) {
  const Index c2 = cfg.widths[2], c3 = cfg.widths[3], c4 = cfg.widths[4];
  add_sppf_params(store, "neck.sppf", c4, cfg.ssm, rng);
  add_neck_block(store, "neck.td3", c4 + c3, c3, cfg.ssm, rng);
  add_neck_block(store, "neck.td2", c3 + c2, c2, cfg.ssm, rng);
  add_conv(store, "neck.down3", c2, c2, 3, rng);
  add_neck_block(store, "neck.bu3", c2 + c3, c3, cfg.ssm, rng);
  add_conv(store, "neck.down4", c3, c3, 3, rng);
  add_neck_block(store, "neck.bu4", c3 + c4, c4, cfg.ssm, rng);
}

template <typename T>
RawPredictions<T> detect_head(const network::MultiscaleFeatures<T>& features, const ParameterStore<T>& store,
                              const network::ModelConfig& cfg) {
  const std::array<const Tensor<T>*, kNumLevels> maps{&features.p2, &features.p3, &features.p4};
  RawPredictions<T> out;
  for (int l = 0; l < kNumLevels; ++l) {
    const std::string p = "head.p" + std::to_string(l + 2);
    const auto& x = *maps[l];
    out.levels[l].cls = conv_plain(conv_silu(x, store, p + ".cls.0", 1, 1), store, p + ".cls.1");
    out.levels[l].box = conv_plain(conv_silu(x, store, p + ".box.0", 1, 1), store, p + ".box.1");
    out.levels[l].stride = kLevelStrides[l];
    if (out.levels[l].cls.dim(1) != cfg.num_classes || out.levels[l].box.dim(1) != 4 * (cfg.reg_max + 1)) {
      throw ConfigError("head parameters for " + p + " do not match num_classes/reg_max");
    }
  }
  return out;
}

template <typename T>
void add_head_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng) {
  const T prior_bias = static_cast<T>(-std::log((1.0 - 0.01) / 0.01));
  for (int l = 0; l < kNumLevels; ++l) {
    const std::string p = "head.p" + std::to_string(l + 2);
    const Index c = cfg.widths[l + 2];
    add_conv(store, p + ".cls.0", c, c, 3, rng);
    add_conv(store, p + ".cls.1", cfg.num_classes, c, 1, rng);
    for (auto& v : store.at(p + ".cls.1.bias").mutable_data()) v = prior_bias;
    add_conv(store, p + ".box.0", c, c, 3, rng);
    add_conv(store, p + ".box.1", 4 * (cfg.reg_max + 1), c, 1, rng);
  }
}

template <typename T>
void add_detector_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng) {
  network::add_backbone_params(store, cfg, rng);
  CounterRng neck_rng = rng.fork(1);
  add_neck_params(store, cfg, neck_rng);
  CounterRng head_rng = rng.fork(2);
  add_head_params(store, cfg, head_rng);
}

template <typename T>
RawPredictions<T> detector_forward(const network::ImagePair<T>& pair, const ParameterStore<T>& store,
                                   const network::ModelConfig& cfg) {
  return detect_head(dnm_forward(network::backbone_forward(pair, store, cfg), store), store, cfg);
}

#define UAVD_INSTANTIATE(T)                                                                        \
  template Tensor<T> sppf_m<T>(const Tensor<T>&, const ParameterStore<T>&, const std::string&);   \
  template void add_sppf_params<T>(ParameterStore<T>&, const std::string&, Index, const ssm::SsmConfig&, \
                                   CounterRng&);                                                   \
  template network::MultiscaleFeatures<T> dnm_forward<T>(const network::MultiscaleFeatures<T>&,    \
                                                         const ParameterStore<T>&);                \
  template void add_neck_params<T>(ParameterStore<T>&, const network::ModelConfig&, CounterRng&);  \
  template RawPredictions<T> detect_head<T>(const network::MultiscaleFeatures<T>&, const ParameterStore<T>&, \
                                            const network::ModelConfig&);                          \
  template void add_head_params<T>(ParameterStore<T>&, const network::ModelConfig&, CounterRng&);  \
  template void add_detector_params<T>(ParameterStore<T>&, const network::ModelConfig&, CounterRng&); \
  template RawPredictions<T> detector_forward<T>(const network::ImagePair<T>&, const ParameterStore<T>&, \
                                                 const network::ModelConfig&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::detect

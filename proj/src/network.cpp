#include "uavd/network.hpp"

#include <fstream>
#include <sstream>

namespace uavd::network {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Index to_index(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<Index>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " expects an integer, got '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " expects a number, got '" + v + "'");
  }
}

template <typename F>
void take(KeyValues& kv, const std::string& key, F&& f) {
  auto it = kv.find(key);
  if (it == kv.end()) return;
  f(it->second);
  kv.erase(it);
}

Index spatial_out(Index size, const deformable::TokenGeometry& g) {
  return (size + 2 * g.padding - g.kernel) / g.stride + 1;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " is not key=value: " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + " has an empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("duplicate config key " + key);
  }
  return kv;
}

KeyValues load_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str());
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.widths = {8, 16, 16, 32, 32};
  c.ssm.state = 4;
  c.ssm.expand = 1;
  return c;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.input_size = 640;
  return c;
}

void ModelConfig::apply(KeyValues& kv) {
  take(kv, "input_size", [&](auto& v) { input_size = to_index("input_size", v); });
  take(kv, "ffar_stride", [&](auto& v) { ffar_stride = to_index("ffar_stride", v); });
  take(kv, "ffar_kernel", [&](auto& v) { ffar_kernel = to_index("ffar_kernel", v); });
  take(kv, "ffar_padding", [&](auto& v) { ffar_padding = to_index("ffar_padding", v); });
  take(kv, "stage_kernel", [&](auto& v) { stage_kernel = to_index("stage_kernel", v); });
  take(kv, "stage_padding", [&](auto& v) { stage_padding = to_index("stage_padding", v); });
  take(kv, "widths", [&](auto& v) {
    std::istringstream in(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(in, item, ',')) {
      if (i >= widths.size()) throw ConfigError("widths expects 5 comma-separated values");
      widths[i++] = to_index("widths", trim(item));
    }
    if (i != widths.size()) throw ConfigError("widths expects 5 comma-separated values");
  });
  take(kv, "ssm_state", [&](auto& v) { ssm.state = to_index("ssm_state", v); });
  take(kv, "ssm_expand", [&](auto& v) { ssm.expand = to_index("ssm_expand", v); });
  take(kv, "ssm_conv", [&](auto& v) { ssm.conv_kernel = to_index("ssm_conv", v); });
  take(kv, "dt_rank", [&](auto& v) { ssm.dt_rank = to_index("dt_rank", v); });
  take(kv, "attn_kernel", [&](auto& v) { attention.spatial_kernel = to_index("attn_kernel", v); });
  take(kv, "reduction", [&](auto& v) { attention.reduction = to_index("reduction", v); });
  take(kv, "channel_max_pool", [&](auto& v) { attention.channel_max_pool = to_index("channel_max_pool", v) != 0; });
  take(kv, "eps", [&](auto& v) { attention.eps = to_real("eps", v); });
  take(kv, "num_classes", [&](auto& v) { num_classes = to_index("num_classes", v); });
  take(kv, "reg_max", [&](auto& v) { reg_max = to_index("reg_max", v); });
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "input_size = " << input_size << '\n'
     << "ffar_stride = " << ffar_stride << '\n'
     << "ffar_kernel = " << ffar_kernel << '\n'
     << "ffar_padding = " << ffar_padding << '\n'
     << "stage_kernel = " << stage_kernel << '\n'
     << "stage_padding = " << stage_padding << '\n'
     << "widths = " << widths[0] << ',' << widths[1] << ',' << widths[2] << ',' << widths[3] << ','
     << widths[4] << '\n'
     << "ssm_state = " << ssm.state << '\n'
     << "ssm_expand = " << ssm.expand << '\n'
     << "ssm_conv = " << ssm.conv_kernel << '\n'
     << "dt_rank = " << ssm.dt_rank << '\n'
     << "attn_kernel = " << attention.spatial_kernel << '\n'
     << "reduction = " << attention.reduction << '\n'
     << "channel_max_pool = " << (attention.channel_max_pool ? 1 : 0) << '\n'
     << "eps = " << attention.eps << '\n'
     << "num_classes = " << num_classes << '\n'
     << "reg_max = " << reg_max << '\n';
  return os.str();
}

void ModelConfig::validate() const {
  for (Index w : widths) {
    if (w < 1) throw ConfigError("stage widths must be positive");
  }
  if (ffar_stride < 1) throw ConfigError("ffar_stride must be positive");
  if (input_size < 1 || input_size % max_stride() != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " must be divisible by the total stride " +
                      std::to_string(max_stride()));
  }
  if (spatial_out(input_size, ffar_geometry(*this)) != input_size / ffar_stride) {
    throw ConfigError("ffar kernel/padding do not give an exact stride-" + std::to_string(ffar_stride) + " grid");
  }
  const Index s1 = input_size / ffar_stride;
  if (spatial_out(s1, stage_geometry(*this)) != s1 / 2) {
    throw ConfigError("stage kernel/padding do not halve the grid");
  }
  if (attention.spatial_kernel % 2 == 0) {
    throw ConfigError("attention kernel must be odd, got " + std::to_string(attention.spatial_kernel));
  }
  if (attention.reduction < 1 || widths[0] % attention.reduction != 0) {
    throw ConfigError("fusion width " + std::to_string(widths[0]) + " not divisible by reduction " +
                      std::to_string(attention.reduction));
  }
  if (ssm.state < 1 || ssm.expand < 1 || ssm.conv_kernel % 2 == 0) {
    throw ConfigError("ssm_state and ssm_expand must be positive and ssm_conv odd");
  }
  if (num_classes < 1 || reg_max < 1) throw ConfigError("num_classes and reg_max must be positive");
}

deformable::TokenGeometry ffar_geometry(const ModelConfig& cfg) {
  return {cfg.ffar_kernel, cfg.ffar_stride, cfg.ffar_padding};
}

deformable::TokenGeometry stage_geometry(const ModelConfig& cfg) {
  return {cfg.stage_kernel, 2, cfg.stage_padding};
}

template <typename T>
void validate_pair(const ImagePair<T>& pair, const ModelConfig& cfg) {
  if (pair.rgb.rank() != 4 || pair.ir.rank() != 4 || pair.rgb.dim(1) != 3 || pair.ir.dim(1) != 1) {
    throw ConfigError("image pair must be [B,3,H,W] + [B,1,H,W], got " + to_string(pair.rgb.shape()) +
                      " + " + to_string(pair.ir.shape()));
  }
  if (pair.rgb.dim(0) != pair.ir.dim(0) || pair.rgb.dim(2) != pair.ir.dim(2) ||
      pair.rgb.dim(3) != pair.ir.dim(3)) {
    throw AlignmentError("rgb " + to_string(pair.rgb.shape()) + " and ir " + to_string(pair.ir.shape()) +
                         " are not aligned");
  }
  if (pair.rgb.dim(2) != cfg.input_size || pair.rgb.dim(3) != cfg.input_size) {
    throw AlignmentError("image pair is " + std::to_string(pair.rgb.dim(2)) + "x" +
                         std::to_string(pair.rgb.dim(3)) + ", model expects " +
                         std::to_string(cfg.input_size) + " square (resize first)");
  }
}

template <typename T>
DtmbParams<T> DtmbParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {deformable::TokenParams<T>::from(store, prefix),
          ssm::MambaParams<T>::from(store, prefix + ".mamba")};
}

template <typename T>
void DtmbParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index in_channels,
                        Index out_channels, const deformable::TokenGeometry& geom,
                        const ssm::SsmConfig& ssm_cfg, CounterRng& rng) {
  deformable::TokenParams<T>::add(store, prefix, in_channels, out_channels, geom, rng);
  ssm::MambaParams<T>::add(store, prefix + ".mamba", out_channels, ssm_cfg, rng);
}

template <typename T>
void add_backbone_params(ParameterStore<T>& store, const ModelConfig& cfg, CounterRng& rng) {
  cfg.validate();
  const Index c0 = cfg.widths[0];
  using attention::ChannelMlpParams;
  using attention::SpatialParams;
  SpatialParams<T>::add(store, "ffar.attn.rgb.spatial", cfg.attention.spatial_kernel, rng);
  SpatialParams<T>::add(store, "ffar.attn.ir.spatial", cfg.attention.spatial_kernel, rng);
  DtmbParams<T>::add(store, "ffar.rgb.dtmb", 3, c0, ffar_geometry(cfg), cfg.ssm, rng);
  DtmbParams<T>::add(store, "ffar.ir.dtmb", 1, c0, ffar_geometry(cfg), cfg.ssm, rng);
  ssm::FusionMambaParams<T>::add(store, "ffar.fusion_mamba.rgb", c0, cfg.ssm, rng);
  ssm::FusionMambaParams<T>::add(store, "ffar.fusion_mamba.ir", c0, cfg.ssm, rng);
  ChannelMlpParams<T>::add(store, "ffar.attn.rgb.channel", c0, cfg.attention.reduction, rng);
  ChannelMlpParams<T>::add(store, "ffar.attn.ir.channel", c0, cfg.attention.reduction, rng);
  for (int n = 1; n <= 4; ++n) {
    DtmbParams<T>::add(store, "mdtmb.stage" + std::to_string(n) + ".dtmb", cfg.widths[n - 1],
                       cfg.widths[n], stage_geometry(cfg), cfg.ssm, rng);
  }
}

template <typename T>
Tensor<T> dtmb_forward(const Tensor<T>& input, const DtmbParams<T>& params,
                       const deformable::TokenGeometry& geom) {
  if (input.rank() != 4 || input.dim(1) != params.tokens.norm_conv.weight.dim(1)) {
    throw ConfigError("dtmb input " + to_string(input.shape()) + " does not match stage input width " +
                      std::to_string(params.tokens.norm_conv.weight.dim(1)));
  }
  if (input.dim(2) % geom.stride != 0 || input.dim(3) % geom.stride != 0) {
    throw ConfigError("dtmb input " + to_string(input.shape()) + " not divisible by stride " +
                      std::to_string(geom.stride));
  }
  const auto tokens = deformable::deformable_token(input, params.tokens, geom);
  return ssm::mamba_block(tokens.tokens, params.mamba);
}

template <typename T>
Tensor<T> ffar_forward(const ImagePair<T>& pair, const ParameterStore<T>& store, const ModelConfig& cfg) {
  validate_pair(pair, cfg);
  using attention::ChannelMlpParams;
  using attention::SpatialParams;
  const auto [cs_rgb, cs_ir] = attention::cross_enhanced_spatial(
      pair.rgb, pair.ir, SpatialParams<T>::from(store, "ffar.attn.rgb.spatial"),
      SpatialParams<T>::from(store, "ffar.attn.ir.spatial"));
  const auto geom = ffar_geometry(cfg);
  const auto m_rgb = dtmb_forward(cs_rgb, DtmbParams<T>::from(store, "ffar.rgb.dtmb"), geom);
  const auto m_ir = dtmb_forward(cs_ir, DtmbParams<T>::from(store, "ffar.ir.dtmb"), geom);
  const auto fm_rgb = ssm::fusion_mamba_block(m_rgb, m_ir, ssm::FusionMambaParams<T>::from(store, "ffar.fusion_mamba.rgb"));
  const auto fm_ir = ssm::fusion_mamba_block(m_ir, m_rgb, ssm::FusionMambaParams<T>::from(store, "ffar.fusion_mamba.ir"));
  const auto w_rgb = attention::channel_attention(fm_rgb, ChannelMlpParams<T>::from(store, "ffar.attn.rgb.channel"),
                                                  cfg.attention.reduction, cfg.attention.channel_max_pool);
  const auto w_ir = attention::channel_attention(fm_ir, ChannelMlpParams<T>::from(store, "ffar.attn.ir.channel"),
                                                 cfg.attention.reduction, cfg.attention.channel_max_pool);
  return attention::cross_channel_fuse(fm_rgb, fm_ir, w_rgb, w_ir, static_cast<T>(cfg.attention.eps));
}

template <typename T>
MultiscaleFeatures<T> mdtmb_forward(const Tensor<T>& fused, const ParameterStore<T>& store,
                                    const ModelConfig& cfg) {
  if (fused.rank() != 4 || fused.dim(2) % 16 != 0 || fused.dim(3) % 16 != 0) {
    throw ConfigError("multiscale stack input " + to_string(fused.shape()) + " must have sides divisible by 16");
  }
  const auto geom = stage_geometry(cfg);
  std::array<Tensor<T>, 5> f;
  f[0] = fused;
  for (int n = 1; n <= 4; ++n) {
    f[n] = dtmb_forward(f[n - 1], DtmbParams<T>::from(store, "mdtmb.stage" + std::to_string(n) + ".dtmb"), geom);
  }
  return {f[2], f[3], f[4]};
}

template <typename T>
MultiscaleFeatures<T> backbone_forward(const ImagePair<T>& pair, const ParameterStore<T>& store,
                                       const ModelConfig& cfg) {
  return mdtmb_forward(ffar_forward(pair, store, cfg), store, cfg);
}

template <typename T>
deformable::OffsetField<T> first_dtmb_offsets(const ImagePair<T>& pair, const ParameterStore<T>& store,
                                              const ModelConfig& cfg) {
  validate_pair(pair, cfg);
  using attention::SpatialParams;
  const auto enhanced = attention::cross_enhanced_spatial(
      pair.rgb, pair.ir, SpatialParams<T>::from(store, "ffar.attn.rgb.spatial"),
      SpatialParams<T>::from(store, "ffar.attn.ir.spatial"));
  return deformable::predict_offsets(enhanced.first,
                                     deformable::ConvParams<T>::from(store, "ffar.rgb.dtmb.offset_conv"),
                                     ffar_geometry(cfg));
}

#define UAVD_INSTANTIATE(T)                                                                       \
  template void validate_pair<T>(const ImagePair<T>&, const ModelConfig&);                        \
  template struct DtmbParams<T>;                                                                  \
  template void add_backbone_params<T>(ParameterStore<T>&, const ModelConfig&, CounterRng&);      \
  template Tensor<T> dtmb_forward<T>(const Tensor<T>&, const DtmbParams<T>&, const deformable::TokenGeometry&); \
  template Tensor<T> ffar_forward<T>(const ImagePair<T>&, const ParameterStore<T>&, const ModelConfig&); \
  template MultiscaleFeatures<T> mdtmb_forward<T>(const Tensor<T>&, const ParameterStore<T>&, const ModelConfig&); \
  template MultiscaleFeatures<T> backbone_forward<T>(const ImagePair<T>&, const ParameterStore<T>&, \
                                                     const ModelConfig&);                         \
  template deformable::OffsetField<T> first_dtmb_offsets<T>(const ImagePair<T>&, const ParameterStore<T>&, \
                                                            const ModelConfig&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::network

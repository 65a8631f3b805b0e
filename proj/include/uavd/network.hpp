#pragma once

#include <array>
#include <map>
#include <string>

#include "uavd/attention.hpp"
#include "uavd/deformable.hpp"
#include "uavd/ssm.hpp"

// Backbone assembly: the deformable-token Mamba block, the RGB-IR fusion
// front end and the four-stage multiscale stack.

namespace uavd::network {

using KeyValues = std::map<std::string, std::string>;

/// Parses `key = value` lines; `#` starts a comment. Throws ConfigError on
/// malformed lines or duplicate keys.
KeyValues parse_key_values(const std::string& text);
KeyValues load_key_values(const std::string& path);

struct ModelConfig {
  Index input_size = 128;
  Index ffar_stride = 4;
  Index ffar_kernel = 4;
  Index ffar_padding = 0;
  Index stage_kernel = 3;
  Index stage_padding = 1;
  std::array<Index, 5> widths{16, 32, 64, 128, 256};  // C0 (fusion output) .. C4
  ssm::SsmConfig ssm{};
  attention::AttentionConfig attention{};
  Index num_classes = 5;
  Index reg_max = 7;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
  /// Total stride of the deepest level.
  Index max_stride() const { return ffar_stride * 16; }

  static ModelConfig desk();
  /// Small widths for fast overfit runs.
  static ModelConfig tiny();
  /// 640x640 inputs, desk widths.
  static ModelConfig paper_scale();

  /// Overrides fields named in `kv`; consumed keys are erased.
  void apply(KeyValues& kv);
  std::string to_text() const;
};

template <typename T>
struct ImagePair {
  Tensor<T> rgb;  // [B,3,H,W] in [0,1]
  Tensor<T> ir;   // [B,1,H,W] in [0,1]
};

/// Throws AlignmentError / ConfigError when the pair does not fit the config.
template <typename T>
void validate_pair(const ImagePair<T>& pair, const ModelConfig& cfg);

template <typename T>
struct DtmbParams {
  deformable::TokenParams<T> tokens;
  ssm::MambaParams<T> mamba;

  /// Reads `<prefix>.{norm_conv,def_conv,offset_conv}.*` and `<prefix>.mamba.*`.
  static DtmbParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index in_channels,
                  Index out_channels, const deformable::TokenGeometry& geom,
                  const ssm::SsmConfig& ssm_cfg, CounterRng& rng);
};

template <typename T>
struct MultiscaleFeatures {
  Tensor<T> p2;  // stride 16
  Tensor<T> p3;  // stride 32
  Tensor<T> p4;  // stride 64
};

deformable::TokenGeometry ffar_geometry(const ModelConfig& cfg);
deformable::TokenGeometry stage_geometry(const ModelConfig& cfg);

/// Adds every `ffar.*` and `mdtmb.stage{1..4}.*` parameter.
template <typename T>
void add_backbone_params(ParameterStore<T>& store, const ModelConfig& cfg, CounterRng& rng);

/// mamba_block(deformable_token(input)).
template <typename T>
Tensor<T> dtmb_forward(const Tensor<T>& input, const DtmbParams<T>& params,
                       const deformable::TokenGeometry& geom);

/// Spatial cross-enhancement, per-modality DTMB, the two fusion blocks,
/// channel attention and cross-channel fusion. Output [B, C0, H/s, W/s].
template <typename T>
Tensor<T> ffar_forward(const ImagePair<T>& pair, const ParameterStore<T>& store, const ModelConfig& cfg);

/// Four chained stride-2 DTMBs; returns the outputs of stages 2, 3 and 4.
template <typename T>
MultiscaleFeatures<T> mdtmb_forward(const Tensor<T>& fused, const ParameterStore<T>& store,
                                    const ModelConfig& cfg);

template <typename T>
MultiscaleFeatures<T> backbone_forward(const ImagePair<T>& pair, const ParameterStore<T>& store,
                                       const ModelConfig& cfg);

/// Offsets predicted by the RGB front-end DTMB, in input-image pixels.
template <typename T>
deformable::OffsetField<T> first_dtmb_offsets(const ImagePair<T>& pair, const ParameterStore<T>& store,
                                              const ModelConfig& cfg);

}  // namespace uavd::network

#pragma once

#include <array>
#include <string>
#include <string_view>

#include "uavd/ops.hpp"
#include "uavd/rng.hpp"

// Selective-scan state-space kernels: the four-way vision Mamba block and the
// two-input fusion block whose scan parameters come from a second modality.

namespace uavd::ssm {

enum class ScanDirection { row_fwd, row_bwd, col_fwd, col_bwd };

inline constexpr std::array<ScanDirection, 4> kDirections{
    ScanDirection::row_fwd, ScanDirection::row_bwd, ScanDirection::col_fwd, ScanDirection::col_bwd};

constexpr std::string_view name(ScanDirection d) {
  switch (d) {
    case ScanDirection::row_fwd: return "row_fwd";
    case ScanDirection::row_bwd: return "row_bwd";
    case ScanDirection::col_fwd: return "col_fwd";
    case ScanDirection::col_bwd: return "col_bwd";
  }
  return "?";
}

struct SsmConfig {
  Index expand = 2;       // inner width = expand * channels
  Index state = 8;        // N
  Index conv_kernel = 3;  // depthwise conv before the scan
  Index dt_rank = 0;      // 0 selects ceil(inner / 16)

  Index rank_for(Index inner) const { return dt_rank > 0 ? dt_rank : (inner + 15) / 16; }
};

/// One directional scan's parameters. A = -exp(a_log) [D, N]; d_skip [D];
/// x_proj [R + 2N, D] produces (dt seed, B, C) per step; dt_proj [D, R] + bias,
/// then delta = softplus(dt_proj(seed)).
template <typename T>
struct SsmParams {
  Tensor<T> a_log;
  Tensor<T> d_skip;
  Tensor<T> x_proj;
  Tensor<T> dt_proj_weight;
  Tensor<T> dt_proj_bias;

  Index inner() const { return a_log.dim(0); }
  Index state() const { return a_log.dim(1); }
  Index rank() const { return dt_proj_weight.dim(1); }

  static SsmParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index inner, Index state,
                  Index rank, CounterRng& rng);
};

/// Reorders [B,C,H,W] into a [B, H*W, C] sequence in the given traversal.
template <typename T>
Tensor<T> flatten(const Tensor<T>& feature, ScanDirection dir);

/// Inverse of flatten.
template <typename T>
Tensor<T> unflatten(const Tensor<T>& seq, ScanDirection dir, Index height, Index width);

/// The raw recurrence, per channel d and state n, h_0 = 0:
///   h_t = exp(delta_t * A) h_{t-1} + delta_t B_t u_t,  y_t = C_t . h_t + D u_t.
/// u, delta [B,L,D]; b, c [B,L,N]. Throws NumericError naming the first step
/// with a non-finite output.
template <typename T>
Tensor<T> scan_recurrence(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a_log,
                          const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip);

/// Scan of u whose delta, B and C are projected from `driver` (same shape as u).
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& driver, const SsmParams<T>& params);

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const SsmParams<T>& params) {
  return selective_scan(u, u, params);
}

/// Scans the four traversals with their own parameter sets, restores the
/// layout and merges by (row_fwd + row_bwd) + (col_fwd + col_bwd).
template <typename T>
Tensor<T> four_way_scan(const Tensor<T>& feature, const Tensor<T>& driver,
                        const std::array<SsmParams<T>, 4>& params);

template <typename T>
Tensor<T> four_way_scan(const Tensor<T>& feature, const std::array<SsmParams<T>, 4>& params) {
  return four_way_scan(feature, feature, params);
}

template <typename T>
struct MambaParams {
  Tensor<T> norm_weight, norm_bias;
  Tensor<T> in_proj_weight, in_proj_bias;  // [Di, C, 1, 1]
  Tensor<T> gate_weight, gate_bias;        // [Di, C, 1, 1]
  Tensor<T> conv_weight, conv_bias;        // depthwise [Di, 1, K, K]
  std::array<SsmParams<T>, 4> scans;       // indexed by kDirections
  Tensor<T> out_proj_weight, out_proj_bias;  // [C, Di, 1, 1]

  static MambaParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                  const SsmConfig& cfg, CounterRng& rng);
};

/// Second-modality branch of the fusion block: its own norm, projection and
/// depthwise conv, feeding the scan-parameter projections.
template <typename T>
struct FusionMambaParams {
  MambaParams<T> main;
  Tensor<T> aux_norm_weight, aux_norm_bias;
  Tensor<T> aux_in_proj_weight, aux_in_proj_bias;
  Tensor<T> aux_conv_weight, aux_conv_bias;

  static FusionMambaParams from(const ParameterStore<T>& store, const std::string& prefix);
  static void add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                  const SsmConfig& cfg, CounterRng& rng);
};

/// x + out_proj(four_way_scan(SiLU(dwconv(in_proj(LN x)))) * SiLU(gate(LN x))).
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& input, const MambaParams<T>& params);

/// As mamba_block, but every directional scan takes delta, B and C from the
/// auxiliary branch while scanning the primary's values. Residual and gate
/// come from the primary.
template <typename T>
Tensor<T> fusion_mamba_block(const Tensor<T>& primary, const Tensor<T>& auxiliary,
                             const FusionMambaParams<T>& params);

}  // namespace uavd::ssm

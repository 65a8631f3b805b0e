#pragma once

#include <string>
#include <vector>

#include "uavd/data.hpp"

// Normal-versus-adaptive sampling patches of the first deformable token block,
// drawn over the RGB image.

namespace uavd::viz {

/// Image coordinates: x is the column, y the row, both in pixels.
struct Point {
  double x = 0, y = 0;
};

/// One token site with its K*K lattice taps and the offset-displaced taps.
struct TokenPatch {
  Index row = 0, col = 0;
  std::vector<Point> lattice;
  std::vector<Point> adaptive;

  /// Largest Euclidean distance between a tap and its lattice point.
  double max_shift() const;
};

/// Patches of every token of batch item `batch_index`, row-major.
template <typename T>
std::vector<TokenPatch> patch_geometry(const deformable::OffsetField<T>& offsets, Index batch_index,
                                       const deformable::TokenGeometry& geom);

/// The `count` patches with the largest shift, ties to the earlier token.
std::vector<TokenPatch> most_displaced(std::vector<TokenPatch> patches, std::size_t count);

inline constexpr std::uint8_t kLatticeColor[3]{0, 0, 255};
inline constexpr std::uint8_t kAdaptiveColor[3]{255, 0, 0};

/// Copies `rgb` and paints each lattice tap blue, then each adaptive tap red,
/// at the nearest pixel. Taps outside the image are skipped.
data::Image render_patches(const data::Image& rgb, const std::vector<TokenPatch>& patches);

struct PatchReport {
  std::vector<TokenPatch> all;    // every token of the sample
  std::vector<TokenPatch> shown;  // the subset that was drawn
  data::Image image;

  double max_shift() const;
  /// Tokens with at least one tap displaced more than `pixels`.
  std::size_t tokens_beyond(double pixels) const;
};

/// Runs the attention front end and the first RGB deformable token block on
/// `sample` and renders its `count` most displaced tokens.
template <typename T>
PatchReport visualize_patches(const ParameterStore<T>& params, const network::ModelConfig& cfg,
                              const data::Sample& sample, std::size_t count = 16);

}  // namespace uavd::viz

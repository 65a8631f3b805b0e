#include "uavd/viz.hpp"

#include <algorithm>
#include <cmath>

namespace uavd::viz {

double TokenPatch::max_shift() const {
  double best = 0;
  for (std::size_t i = 0; i < lattice.size(); ++i) {
    best = std::max(best, std::hypot(adaptive[i].x - lattice[i].x, adaptive[i].y - lattice[i].y));
  }
  return best;
}

template <typename T>
std::vector<TokenPatch> patch_geometry(const deformable::OffsetField<T>& offsets, Index batch_index,
                                       const deformable::TokenGeometry& geom) {
  const auto& off = offsets.offsets;
  const Index k = geom.kernel, taps = k * k;
  if (off.rank() != 4 || off.dim(1) != 2 * taps) {
    throw ConfigError("offset field " + to_string(off.shape()) + " does not fit kernel " + std::to_string(k));
  }
  if (batch_index < 0 || batch_index >= off.dim(0)) {
    throw ConfigError("batch index " + std::to_string(batch_index) + " out of range");
  }
  const Index h = off.dim(2), w = off.dim(3);
  const auto v = off.data();
  std::vector<TokenPatch> out;
  out.reserve(static_cast<std::size_t>(h * w));
  for (Index oy = 0; oy < h; ++oy) {
    for (Index ox = 0; ox < w; ++ox) {
      TokenPatch p{oy, ox, {}, {}};
      for (Index t = 0; t < taps; ++t) {
        const Point base{static_cast<double>(ox * geom.stride - geom.padding + t % k),
                         static_cast<double>(oy * geom.stride - geom.padding + t / k)};
        const auto at = [&](Index ch) {
          return static_cast<double>(v[static_cast<std::size_t>(((batch_index * 2 * taps + ch) * h + oy) * w + ox)]);
        };
        p.lattice.push_back(base);
        p.adaptive.push_back({base.x + at(2 * t + 1), base.y + at(2 * t)});
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<TokenPatch> most_displaced(std::vector<TokenPatch> patches, std::size_t count) {
  std::stable_sort(patches.begin(), patches.end(),
                   [](const TokenPatch& a, const TokenPatch& b) { return a.max_shift() > b.max_shift(); });
  if (patches.size() > count) patches.resize(count);
  return patches;
}

data::Image render_patches(const data::Image& rgb, const std::vector<TokenPatch>& patches) {
  if (rgb.channels != 3) throw ConfigError("patch overlays need a 3-channel image");
  data::Image out = rgb;
  auto paint = [&](const Point& p, const std::uint8_t* color) {
    const long x = std::lround(p.x), y = std::lround(p.y);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || x < 0 || y < 0 || x >= out.width || y >= out.height) return;
    for (int c = 0; c < 3; ++c) out.at(static_cast<int>(x), static_cast<int>(y), c) = color[c];
  };
  for (const auto& p : patches) {
    for (const auto& q : p.lattice) paint(q, kLatticeColor);
  }
  for (const auto& p : patches) {
    for (const auto& q : p.adaptive) paint(q, kAdaptiveColor);
  }
  return out;
}

double PatchReport::max_shift() const {
  double best = 0;
  for (const auto& p : all) best = std::max(best, p.max_shift());
  return best;
}

std::size_t PatchReport::tokens_beyond(double pixels) const {
  return static_cast<std::size_t>(
      std::count_if(all.begin(), all.end(), [&](const TokenPatch& p) { return p.max_shift() > pixels; }));
}

template <typename T>
PatchReport visualize_patches(const ParameterStore<T>& params, const network::ModelConfig& cfg,
                              const data::Sample& sample, std::size_t count) {
  NoGradGuard guard;
  const auto pair = data::to_pair<T>({&sample});
  const auto offsets = network::first_dtmb_offsets(pair, params, cfg);
  PatchReport report;
  report.all = patch_geometry(offsets, 0, network::ffar_geometry(cfg));
  report.shown = most_displaced(report.all, count);
  report.image = render_patches(sample.rgb, report.shown);
  return report;
}

#define UAVD_INSTANTIATE(T)                                                                           \
  template std::vector<TokenPatch> patch_geometry<T>(const deformable::OffsetField<T>&, Index,        \
                                                     const deformable::TokenGeometry&);               \
  template PatchReport visualize_patches<T>(const ParameterStore<T>&, const network::ModelConfig&,    \
                                            const data::Sample&, std::size_t);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::viz

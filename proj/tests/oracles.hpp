#pragma once

// Reference implementations used only by the tests. Written as plain loops
// over the textbook definitions, sharing no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "uavd/detect.hpp"
#include "uavd/rng.hpp"

namespace oracle {

using uavd::Index;

inline std::vector<double> random_values(uavd::CounterRng& rng, Index n, double lo = -1, double hi = 1) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Six nested loops over (b, co, oy, ox, ci, ky, kx).
inline std::vector<double> conv2d(const std::vector<double>& in, Index B, Index C, Index H, Index W,
                                  const std::vector<double>& w, Index Co, Index K, const std::vector<double>& bias,
                                  Index stride, Index pad) {
  const Index Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(B * Co * Ho * Wo), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index co = 0; co < Co; ++co)
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (Index ci = 0; ci < C; ++ci)
            for (Index ky = 0; ky < K; ++ky)
              for (Index kx = 0; kx < K; ++kx) {
                const Index y = oy * stride - pad + ky, x = ox * stride - pad + kx;
                if (y < 0 || y >= H || x < 0 || x >= W) continue;
                acc += in[((b * C + ci) * H + y) * W + x] * w[((co * C + ci) * K + ky) * K + kx];
              }
          out[((b * Co + co) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

/// Sum over the four lattice neighbors of max(0, 1-|dy|) * max(0, 1-|dx|) * v.
inline double bilinear(const std::vector<double>& plane, Index H, Index W, double y, double x) {
  double acc = 0;
  const Index y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  for (Index yy = y0; yy <= y0 + 1; ++yy)
    for (Index xx = x0; xx <= x0 + 1; ++xx) {
      if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
      const double wy = std::max(0.0, 1.0 - std::abs(y - static_cast<double>(yy)));
      const double wx = std::max(0.0, 1.0 - std::abs(x - static_cast<double>(xx)));
      acc += wy * wx * plane[yy * W + xx];
    }
  return acc;
}

/// Deformable conv by direct sampling; offsets [B, 2K^2, Ho, Wo], (dy, dx) per tap.
inline std::vector<double> deform_conv2d(const std::vector<double>& in, Index B, Index C, Index H, Index W,
                                         const std::vector<double>& w, Index Co, Index K,
                                         const std::vector<double>& bias, const std::vector<double>& off,
                                         Index stride, Index pad) {
  const Index Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(B * Co * Ho * Wo), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index co = 0; co < Co; ++co)
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (Index ky = 0; ky < K; ++ky)
            for (Index kx = 0; kx < K; ++kx) {
              const Index t = ky * K + kx;
              const double dy = off[((b * 2 * K * K + 2 * t) * Ho + oy) * Wo + ox];
              const double dx = off[((b * 2 * K * K + 2 * t + 1) * Ho + oy) * Wo + ox];
              const double y = static_cast<double>(oy * stride - pad + ky) + dy;
              const double x = static_cast<double>(ox * stride - pad + kx) + dx;
              for (Index ci = 0; ci < C; ++ci) {
                const std::vector<double> plane(in.begin() + ((b * C + ci) * H) * W,
                                                in.begin() + ((b * C + ci + 1) * H) * W);
                acc += bilinear(plane, H, W, y, x) * w[((co * C + ci) * K + ky) * K + kx];
              }
            }
          out[((b * Co + co) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

inline std::vector<double> max_pool(const std::vector<double>& in, Index B, Index C, Index H, Index W, Index K,
                                    Index stride, Index pad) {
  const Index Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out;
  for (Index p = 0; p < B * C; ++p)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        double best = -INFINITY;
        for (Index ky = 0; ky < K; ++ky)
          for (Index kx = 0; kx < K; ++kx) {
            const Index y = oy * stride - pad + ky, x = ox * stride - pad + kx;
            if (y >= 0 && y < H && x >= 0 && x < W) best = std::max(best, in[(p * H + y) * W + x]);
          }
        out.push_back(best);
      }
  return out;
}

/// h_t = exp(delta A) h + delta B u, y = C.h + D u, per (batch, channel, state).
inline std::vector<double> scan(const std::vector<double>& u, const std::vector<double>& delta,
                                const std::vector<double>& a_log, const std::vector<double>& b,
                                const std::vector<double>& c, const std::vector<double>& d, Index B, Index L,
                                Index D, Index N) {
  std::vector<double> y(static_cast<std::size_t>(B * L * D), 0.0);
  for (Index bb = 0; bb < B; ++bb)
    for (Index ch = 0; ch < D; ++ch)
      for (Index n = 0; n < N; ++n) {
        double h = 0;
        const double A = -std::exp(a_log[ch * N + n]);
        for (Index t = 0; t < L; ++t) {
          const double dt = delta[(bb * L + t) * D + ch], x = u[(bb * L + t) * D + ch];
          h = std::exp(dt * A) * h + dt * b[(bb * L + t) * N + n] * x;
          y[(bb * L + t) * D + ch] += c[(bb * L + t) * N + n] * h;
        }
      }
  for (Index i = 0; i < B * L; ++i)
    for (Index ch = 0; ch < D; ++ch) y[i * D + ch] += d[ch] * u[i * D + ch];
  return y;
}

inline double box_iou(const uavd::detect::DetectionBox& a, const uavd::detect::DetectionBox& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// AP as the sum over true positives of the best precision at that recall or
/// later, divided by the GT count.
inline double average_precision(const std::vector<std::vector<uavd::detect::DetectionBox>>& dets,
                                 const std::vector<std::vector<uavd::detect::DetectionBox>>& gts, int cls,
                                 double thr) {
  struct Item {
    double conf;
    std::size_t image, idx;
  };
  std::vector<Item> items;
  int npos = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i]) npos += g.class_id == cls;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j)
      if (dets[i][j].class_id == cls) items.push_back({dets[i][j].confidence, i, j});
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.conf > b.conf; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<bool> tp;
  for (const auto& it : items) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts[it.image].size(); ++g) {
      const auto& gt = gts[it.image][g];
      if (gt.class_id != cls || used[it.image][g]) continue;
      const double v = box_iou(dets[it.image][it.idx], gt);
      if (v > best) best = v, arg = g;
    }
    const bool hit = best >= thr;
    if (hit) used[it.image][arg] = true;
    tp.push_back(hit);
  }
  if (npos == 0) return 0;
  std::vector<double> precision(tp.size());
  int hits = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) precision[k] = static_cast<double>(hits += tp[k]) / double(k + 1);
  double ap = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    if (!tp[k]) continue;
    ap += *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(k), precision.end());
  }
  return ap / npos;
}

}  // namespace oracle

#include <algorithm>
#include <cmath>
#include <numbers>

#include "uavd/detect.hpp"

namespace uavd::detect {

void DetectionBox::validate(int num_classes) const {
  const bool ok = cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1 && w > 0 && w <= 1 && h > 0 && h <= 1 &&
                  class_id >= 0 && class_id < num_classes && confidence >= 0 && confidence <= 1;
  if (!ok) {
    throw ConfigError("invalid box: class " + std::to_string(class_id) + " cx " + std::to_string(cx) + " cy " +
                      std::to_string(cy) + " w " + std::to_string(w) + " h " + std::to_string(h) +
                      " conf " + std::to_string(confidence));
  }
}

double iou(const DetectionBox& a, const DetectionBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

int route_level(const DetectionBox& gt) {
  const double side = std::max(gt.w, gt.h);
  if (side < 0.1) return 0;
  if (side < 0.25) return 1;
  return 2;
}

int Assignment::foreground() const {
  int n = 0;
  for (const auto& level : matched) n += static_cast<int>(std::count_if(level.begin(), level.end(), [](int m) { return m >= 0; }));
  return n;
}

Assignment assign_targets(const std::vector<DetectionBox>& gt, const std::array<LevelGrid, kNumLevels>& grids) {
  Assignment out;
  std::array<std::vector<double>, kNumLevels> best_dist;
  for (int l = 0; l < kNumLevels; ++l) {
    const auto cells = static_cast<std::size_t>(grids[l].height * grids[l].width);
    out.matched[l].assign(cells, -1);
    best_dist[l].assign(cells, 0.0);
  }
  auto offer = [&](int l, Index y, Index x, int g) {
    const double ax = (static_cast<double>(x) + 0.5) / static_cast<double>(grids[l].width);
    const double ay = (static_cast<double>(y) + 0.5) / static_cast<double>(grids[l].height);
    const double d = (ax - gt[g].cx) * (ax - gt[g].cx) + (ay - gt[g].cy) * (ay - gt[g].cy);
    const auto p = static_cast<std::size_t>(y * grids[l].width + x);
    int& m = out.matched[l][p];
    if (m < 0 || d < best_dist[l][p]) {
      m = g;
      best_dist[l][p] = d;
    }
  };
  for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
    const auto& box = gt[g];
    bool placed = false;
    for (int l = route_level(box); l >= 0 && !placed; --l) {
      const Index H = grids[l].height, W = grids[l].width;
      for (Index y = 0; y < H; ++y) {
        const double ay = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        if (ay < box.y1() || ay > box.y2()) continue;
        for (Index x = 0; x < W; ++x) {
          const double ax = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
          if (ax < box.x1() || ax > box.x2()) continue;
          offer(l, y, x, g);
          placed = true;
        }
      }
    }
    if (!placed) {
      const Index H = grids[0].height, W = grids[0].width;
      const Index y = std::clamp<Index>(static_cast<Index>(box.cy * static_cast<double>(H)), 0, H - 1);
      const Index x = std::clamp<Index>(static_cast<Index>(box.cx * static_cast<double>(W)), 0, W - 1);
      offer(0, y, x, g);
    }
  }
  return out;
}

template <typename T>
std::array<LevelGrid, kNumLevels> grids_of(const RawPredictions<T>& preds) {
  std::array<LevelGrid, kNumLevels> g;
  for (int l = 0; l < kNumLevels; ++l) g[l] = {preds.levels[l].cls.dim(2), preds.levels[l].cls.dim(3)};
  return g;
}

namespace {

// Forward-mode dual number carrying derivatives with respect to the four
// predicted box coordinates.
struct Dual {
  double v = 0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
  return r;
}
Dual min(const Dual& a, const Dual& b) { return b.v < a.v ? b : a; }
Dual max(const Dual& a, const Dual& b) { return b.v > a.v ? b : a; }
Dual atan(const Dual& a) {
  Dual r(std::atan(a.v));
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] / (1 + a.v * a.v);
  return r;
}

double value_of(double x) { return x; }
double value_of(const Dual& x) { return x.v; }

constexpr double kAspectEps = 1e-7;

template <typename S>
S ciou_impl(const std::array<S, 4>& p, const std::array<double, 4>& g) {
  using std::atan;
  using std::max;
  using std::min;
  const S pw = p[2] - p[0], ph = p[3] - p[1];
  const double gw = g[2] - g[0], gh = g[3] - g[1];
  S iw = min(p[2], S(g[2])) - max(p[0], S(g[0]));
  S ih = min(p[3], S(g[3])) - max(p[1], S(g[1]));
  if (value_of(iw) < 0) iw = S(0);
  if (value_of(ih) < 0) ih = S(0);
  const S inter = iw * ih;
  const S uni = pw * ph + S(gw * gh) - inter;
  const S iou_v = inter / uni;
  const S cw = max(p[2], S(g[2])) - min(p[0], S(g[0]));
  const S ch = max(p[3], S(g[3])) - min(p[1], S(g[1]));
  const S c2 = cw * cw + ch * ch;
  const S dx = (p[0] + p[2]) - S(g[0] + g[2]);
  const S dy = (p[1] + p[3]) - S(g[1] + g[3]);
  const S rho2 = (dx * dx + dy * dy) / S(4.0);
  const S dv = atan(S(gw / (gh + kAspectEps))) - atan(pw / (ph + S(kAspectEps)));
  const S v = S(4.0 / (std::numbers::pi * std::numbers::pi)) * dv * dv;
  const S alpha = v / ((S(1.0) - iou_v) + v + S(kAspectEps));
  return iou_v - rho2 / c2 - alpha * v;
}

double log_sum_exp(const double* x, Index n, Index step) {
  double m = x[0];
  for (Index i = 1; i < n; ++i) m = std::max(m, x[i * step]);
  double s = 0;
  for (Index i = 0; i < n; ++i) s += std::exp(x[i * step] - m);
  return m + std::log(s);
}

}  // namespace

double ciou(const std::array<double, 4>& pred, const std::array<double, 4>& target) {
  return ciou_impl<double>(pred, target);
}

double dfl_expectation(const double* logits, Index bins, Index step) {
  const double lse = log_sum_exp(logits, bins, step);
  double e = 0;
  for (Index i = 0; i < bins; ++i) e += static_cast<double>(i) * std::exp(logits[i * step] - lse);
  return e;
}

template <typename T>
LossResult<T> total_loss(const RawPredictions<T>& preds, const std::vector<Assignment>& assignments,
                         const std::vector<std::vector<DetectionBox>>& gts, const LossWeights& weights) {
  const Index B = preds.levels[0].cls.dim(0);
  if (static_cast<Index>(assignments.size()) != B || static_cast<Index>(gts.size()) != B) {
    throw ConfigError("loss expects " + std::to_string(B) + " assignments and GT lists");
  }
  const auto grids = grids_of(preds);
  for (Index b = 0; b < B; ++b) {
    for (int l = 0; l < kNumLevels; ++l) {
      if (static_cast<Index>(assignments[b].matched[l].size()) != grids[l].height * grids[l].width) {
        throw ConfigError("assignment for image " + std::to_string(b) + " does not match level " +
                          std::to_string(l) + " grid");
      }
    }
  }
  int fg = 0;
  for (const auto& a : assignments) fg += a.foreground();
  const double cls_norm = 1.0 / std::max(fg, 1);
  const double fg_norm = fg > 0 ? 1.0 / fg : 0.0;

  std::vector<Tensor<T>> inputs;
  for (const auto& lv : preds.levels) {
    inputs.push_back(lv.cls);
    inputs.push_back(lv.box);
  }
  bool want_grad = grad_enabled();
  if (want_grad) {
    want_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  }
  std::vector<std::vector<double>> grads(inputs.size());
  if (want_grad) {
    for (std::size_t i = 0; i < inputs.size(); ++i) grads[i].assign(static_cast<std::size_t>(inputs[i].size()), 0.0);
  }

  double cls_sum = 0, box_sum = 0, dfl_sum = 0;
  std::vector<double> logits;
  for (int l = 0; l < kNumLevels; ++l) {
    const auto& lv = preds.levels[l];
    const Index C = lv.cls.dim(1), H = lv.cls.dim(2), W = lv.cls.dim(3), HW = H * W;
    const Index bins = lv.box.dim(1) / 4;
    const double reg_max = static_cast<double>(bins - 1);
    if (lv.box.dim(1) != 4 * bins || lv.box.dim(2) != H || lv.box.dim(3) != W || bins < 2) {
      throw ConfigError("level " + std::to_string(l) + " box tensor " + to_string(lv.box.shape()) +
                        " does not match cls tensor " + to_string(lv.cls.shape()));
    }
    const auto cls = lv.cls.data();
    const auto box = lv.box.data();
    auto& gcls = grads[2 * l];
    auto& gbox = grads[2 * l + 1];
    for (Index b = 0; b < B; ++b) {
      for (Index p = 0; p < HW; ++p) {
        const int m = assignments[b].matched[l][p];
        const int target_class = m >= 0 ? gts[b][m].class_id : -1;
        for (Index c = 0; c < C; ++c) {
          const Index idx = (b * C + c) * HW + p;
          const double z = static_cast<double>(cls[idx]);
          const double t = c == target_class ? 1.0 : 0.0;
          cls_sum += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
          if (want_grad) gcls[idx] = weights.cls * cls_norm * (1.0 / (1.0 + std::exp(-z)) - t);
        }
        if (m < 0) continue;
        const auto& gt = gts[b][m];
        const double ax = static_cast<double>(p % W) + 0.5, ay = static_cast<double>(p / W) + 0.5;
        const std::array<double, 4> gbox_grid{gt.x1() * W, gt.y1() * H, gt.x2() * W, gt.y2() * H};
        const std::array<double, 4> target{ax - gbox_grid[0], ay - gbox_grid[1], gbox_grid[2] - ax,
                                           gbox_grid[3] - ay};
        std::array<double, 4> expect{};
        std::array<std::vector<double>, 4> prob;
        for (int s = 0; s < 4; ++s) {
          logits.resize(static_cast<std::size_t>(bins));
          for (Index i = 0; i < bins; ++i) logits[i] = static_cast<double>(box[((b * 4 + s) * bins + i) * HW + p]);
          const double lse = log_sum_exp(logits.data(), bins, 1);
          prob[s].resize(static_cast<std::size_t>(bins));
          for (Index i = 0; i < bins; ++i) {
            prob[s][i] = std::exp(logits[i] - lse);
            expect[s] += static_cast<double>(i) * prob[s][i];
          }
          const double tgt = std::clamp(target[s], 0.0, reg_max - 0.01);
          const Index lo = static_cast<Index>(tgt);
          const double w_hi = tgt - static_cast<double>(lo), w_lo = 1.0 - w_hi;
          dfl_sum += 0.25 * -(w_lo * (logits[lo] - lse) + w_hi * (logits[lo + 1] - lse));
          if (want_grad) {
            for (Index i = 0; i < bins; ++i) {
              const double onehot = (i == lo ? w_lo : 0.0) + (i == lo + 1 ? w_hi : 0.0);
              gbox[((b * 4 + s) * bins + i) * HW + p] += weights.dfl * fg_norm * 0.25 * (prob[s][i] - onehot);
            }
          }
        }
        std::array<Dual, 4> pred{Dual(ax - expect[0]), Dual(ay - expect[1]), Dual(ax + expect[2]),
                                 Dual(ay + expect[3])};
        for (int i = 0; i < 4; ++i) pred[i].d[i] = 1.0;
        const Dual c = ciou_impl<Dual>(pred, gbox_grid);
        box_sum += 1.0 - c.v;
        if (want_grad) {
          // d(pred corner)/d(expectation): -1 for left/top, +1 for right/bottom.
          const std::array<double, 4> sign{-1.0, -1.0, 1.0, 1.0};
          for (int s = 0; s < 4; ++s) {
            const double d_expect = -c.d[s] * sign[s] * weights.box * fg_norm;
            for (Index i = 0; i < bins; ++i) {
              gbox[((b * 4 + s) * bins + i) * HW + p] +=
                  d_expect * prob[s][i] * (static_cast<double>(i) - expect[s]);
            }
          }
        }
      }
    }
  }

  LossResult<T> result;
  result.cls = cls_sum * cls_norm;
  result.box = box_sum * fg_norm;
  result.dfl = dfl_sum * fg_norm;
  result.foreground = fg;
  const double total = weights.cls * result.cls + weights.box * result.box + weights.dfl * result.dfl;
  if (!std::isfinite(total)) throw NumericError("detection loss is not finite");
  result.total = make_result<T>({1}, {static_cast<T>(total)}, "detection_loss", std::move(inputs),
                                [grads = std::move(grads)](Node<T>& self) {
    const double up = static_cast<double>(self.grad[0]);
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node<T>& in = *self.inputs[i];
      if (!in.requires_grad || grads[i].empty()) continue;
      auto& g = in.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += static_cast<T>(up * grads[i][j]);
    }
  });
  return result;
}

#define UAVD_INSTANTIATE(T)                                                                             \
  template std::array<LevelGrid, kNumLevels> grids_of<T>(const RawPredictions<T>&);                    \
  template LossResult<T> total_loss<T>(const RawPredictions<T>&, const std::vector<Assignment>&,       \
                                       const std::vector<std::vector<DetectionBox>>&, const LossWeights&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::detect

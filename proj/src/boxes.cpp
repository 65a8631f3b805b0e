#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "uavd/detect.hpp"

namespace uavd::detect {

std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const DetectionBox& a, const DetectionBox& b) { return a.confidence > b.confidence; });
  std::vector<DetectionBox> kept;
  for (const auto& cand : boxes) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const DetectionBox& k) {
      return k.class_id == cand.class_id && iou(k, cand) > iou_threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<DetectionBox>> decode_boxes(const RawPredictions<T>& preds, double conf_threshold,
                                                    double iou_nms) {
  const Index B = preds.levels[0].cls.dim(0);
  std::vector<std::vector<DetectionBox>> out(static_cast<std::size_t>(B));
  std::vector<double> logits;
  for (Index b = 0; b < B; ++b) {
    std::vector<DetectionBox> cands;
    for (const auto& lv : preds.levels) {
      const Index C = lv.cls.dim(1), H = lv.cls.dim(2), W = lv.cls.dim(3), HW = H * W;
      const Index bins = lv.box.dim(1) / 4;
      const auto cls = lv.cls.data();
      const auto box = lv.box.data();
      for (Index p = 0; p < HW; ++p) {
        Index best = 0;
        for (Index c = 1; c < C; ++c) {
          if (cls[(b * C + c) * HW + p] > cls[(b * C + best) * HW + p]) best = c;
        }
        const double z = static_cast<double>(cls[(b * C + best) * HW + p]);
        const double conf = 1.0 / (1.0 + std::exp(-z));
        if (conf < conf_threshold) continue;
        std::array<double, 4> dist{};
        logits.resize(static_cast<std::size_t>(4 * bins));
        for (Index i = 0; i < 4 * bins; ++i) logits[i] = static_cast<double>(box[(b * 4 * bins + i) * HW + p]);
        for (int s = 0; s < 4; ++s) dist[s] = dfl_expectation(logits.data() + s * bins, bins);
        const double ax = static_cast<double>(p % W) + 0.5, ay = static_cast<double>(p / W) + 0.5;
        const double x1 = std::clamp((ax - dist[0]) / W, 0.0, 1.0);
        const double y1 = std::clamp((ay - dist[1]) / H, 0.0, 1.0);
        const double x2 = std::clamp((ax + dist[2]) / W, 0.0, 1.0);
        const double y2 = std::clamp((ay + dist[3]) / H, 0.0, 1.0);
        if (x2 <= x1 || y2 <= y1) continue;
        DetectionBox d;
        d.cx = (x1 + x2) / 2;
        d.cy = (y1 + y2) / 2;
        d.w = x2 - x1;
        d.h = y2 - y1;
        d.class_id = static_cast<int>(best);
        d.confidence = conf;
        cands.push_back(d);
      }
    }
    out[b] = nms(std::move(cands), iou_nms);
  }
  return out;
}

MapReport eval_map(const std::vector<std::vector<DetectionBox>>& dets,
                   const std::vector<std::vector<DetectionBox>>& gts, double iou_threshold) {
  if (dets.size() != gts.size()) {
    throw ConfigError("eval_map: " + std::to_string(dets.size()) + " detection lists vs " +
                      std::to_string(gts.size()) + " ground-truth lists");
  }
  std::map<int, int> gt_count;
  for (const auto& image : gts) {
    for (const auto& g : image) ++gt_count[g.class_id];
  }
  MapReport report;
  for (const auto& [cls, n_gt] : gt_count) {
    struct Ranked {
      double confidence;
      std::size_t image;
      const DetectionBox* box;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      for (const auto& d : dets[i]) {
        if (d.class_id == cls) ranked.push_back({d.confidence, i, &d});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.confidence > b.confidence; });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const auto& r : ranked) {
      double best = -1;
      int best_j = -1;
      const auto& image_gt = gts[r.image];
      for (std::size_t j = 0; j < image_gt.size(); ++j) {
        if (image_gt[j].class_id != cls || used[r.image][j]) continue;
        const double v = iou(*r.box, image_gt[j]);
        if (v > best) {
          best = v;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0 && best >= iou_threshold) {
        used[r.image][best_j] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / n_gt);
    }
    // Precision envelope from the right, then area under the step curve.
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
    report.classes.push_back(cls);
    report.ap.push_back(ap);
  }
  if (!report.ap.empty()) {
    report.map = std::accumulate(report.ap.begin(), report.ap.end(), 0.0) / static_cast<double>(report.ap.size());
  }
  return report;
}

std::string MapReport::to_text() const {
  std::ostringstream os;
  char line[64];
  os << "class      AP\n";
  for (std::size_t i = 0; i < classes.size(); ++i) {
    std::snprintf(line, sizeof line, "%-6d %8.4f\n", classes[i], ap[i]);
    os << line;
  }
  std::snprintf(line, sizeof line, "mAP    %8.4f\n", map);
  os << line;
  return os.str();
}

std::string format_detection(const std::string& image_id, const DetectionBox& box) {
  char buf[160];
  std::snprintf(buf, sizeof buf, " %d %.6f %.6f %.6f %.6f %.6f", box.class_id, box.confidence, box.cx, box.cy,
                box.w, box.h);
  return image_id + buf;
}

std::vector<std::pair<std::string, DetectionBox>> parse_detections(const std::string& text) {
  std::vector<std::pair<std::string, DetectionBox>> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string id;
    DetectionBox d;
    std::string extra;
    if (!(fields >> id >> d.class_id >> d.confidence >> d.cx >> d.cy >> d.w >> d.h) || (fields >> extra)) {
      throw ConfigError("detection line " + std::to_string(line_no) + " malformed: " + line);
    }
    out.emplace_back(id, d);
  }
  return out;
}

#define UAVD_INSTANTIATE(T)                                                                              \
  template std::vector<std::vector<DetectionBox>> decode_boxes<T>(const RawPredictions<T>&, double, double);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::detect

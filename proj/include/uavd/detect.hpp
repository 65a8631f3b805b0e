#pragma once

#include <array>
#include <string>
#include <vector>

#include "uavd/network.hpp"

// Detection neck, anchor-free head, target assignment, training loss, box
// decoding and mAP evaluation.

namespace uavd::detect {

/// Normalized center-size box. Ground truth carries confidence 1.
struct DetectionBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  int class_id = 0;
  double confidence = 1.0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }

  /// Throws ConfigError unless 0 <= cx,cy <= 1, 0 < w,h <= 1 and the class is in range.
  void validate(int num_classes) const;
};

double iou(const DetectionBox& a, const DetectionBox& b);

inline constexpr std::array<Index, 3> kLevelStrides{16, 32, 64};
inline constexpr int kNumLevels = 3;

template <typename T>
struct LevelPredictions {
  Tensor<T> cls;  // [B, num_classes, H, W]
  Tensor<T> box;  // [B, 4*(reg_max+1), H, W]; left, top, right, bottom bins
  Index stride = 0;
};

template <typename T>
struct RawPredictions {
  std::array<LevelPredictions<T>, kNumLevels> levels;
};

/// conv1x1 -> three cascaded 5x5 stride-1 max pools, each pooled map through
/// its own mamba block -> concat(pre-pool, m1, m2, m3) -> conv1x1.
template <typename T>
Tensor<T> sppf_m(const Tensor<T>& feature, const ParameterStore<T>& store, const std::string& prefix);

template <typename T>
void add_sppf_params(ParameterStore<T>& store, const std::string& prefix, Index channels,
                     const ssm::SsmConfig& ssm_cfg, CounterRng& rng);

/// PAN-style neck; returns refined maps with the input strides and widths.
template <typename T>
network::MultiscaleFeatures<T> dnm_forward(const network::MultiscaleFeatures<T>& features,
                                           const ParameterStore<T>& store);

template <typename T>
void add_neck_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng);

template <typename T>
RawPredictions<T> detect_head(const network::MultiscaleFeatures<T>& features, const ParameterStore<T>& store,
                              const network::ModelConfig& cfg);

/// Class-logit biases start at the 0.01 prior.
template <typename T>
void add_head_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng);

/// Backbone, neck and head parameters.
template <typename T>
void add_detector_params(ParameterStore<T>& store, const network::ModelConfig& cfg, CounterRng& rng);

template <typename T>
RawPredictions<T> detector_forward(const network::ImagePair<T>& pair, const ParameterStore<T>& store,
                                   const network::ModelConfig& cfg);

struct LevelGrid {
  Index height = 0, width = 0;
};

/// Level for a box by its larger side: < 0.1 -> 0, < 0.25 -> 1, else 2.
int route_level(const DetectionBox& gt);

/// Per-image anchor matches; matched[level][y*W + x] is a GT index or -1.
struct Assignment {
  std::array<std::vector<int>, kNumLevels> matched;
  int foreground() const;
};

/// Anchor (level, y, x) is a candidate for a GT when its center
/// ((x+0.5)/W, (y+0.5)/H) lies inside the box (edges inclusive) and the GT
/// routes to that level; each candidate takes the GT with the nearest center,
/// ties to the lower index. A GT left without candidates tries the next finer
/// level, and at the finest level takes the anchor whose cell holds its center.
Assignment assign_targets(const std::vector<DetectionBox>& gt, const std::array<LevelGrid, kNumLevels>& grids);

template <typename T>
std::array<LevelGrid, kNumLevels> grids_of(const RawPredictions<T>& preds);

struct LossWeights {
  double cls = 0.5;
  double box = 7.5;
  double dfl = 1.5;
};

template <typename T>
struct LossResult {
  Tensor<T> total;  // scalar, differentiable in every prediction tensor
  double cls = 0, box = 0, dfl = 0;
  int foreground = 0;
};

/// Complete IoU of (x1, y1, x2, y2) boxes.
double ciou(const std::array<double, 4>& pred, const std::array<double, 4>& target);

/// L_cls: summed one-vs-all BCE over every anchor and class divided by
/// max(foreground, 1). L_box: mean (1 - CIoU) over foreground. L_dfl: mean over
/// foreground and sides of the two-bin cross-entropy around the target
/// distance. Box and DFL terms are 0 without foreground.
template <typename T>
LossResult<T> total_loss(const RawPredictions<T>& preds, const std::vector<Assignment>& assignments,
                         const std::vector<std::vector<DetectionBox>>& gts, const LossWeights& weights);

/// sum_i i * softmax(logits)_i.
double dfl_expectation(const double* logits, Index bins, Index stride_between_bins = 1);

/// Greedy NMS within each class in descending confidence (stable). Boxes with
/// IoU > iou_threshold against a kept box are dropped.
std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold);

/// Per image: confidence sigma(max logit), distances from the DFL expectation,
/// boxes clipped to the image, those below conf_threshold dropped, then NMS.
template <typename T>
std::vector<std::vector<DetectionBox>> decode_boxes(const RawPredictions<T>& preds, double conf_threshold,
                                                    double iou_nms);

struct MapReport {
  std::vector<int> classes;   // classes present in the ground truth
  std::vector<double> ap;     // aligned with classes
  double map = 0;
  std::string to_text() const;
};

/// All-point interpolated AP per class. Detections are taken in descending
/// confidence and each matches the unmatched GT of its image and class with
/// the highest IoU, if that IoU >= iou_threshold.
MapReport eval_map(const std::vector<std::vector<DetectionBox>>& dets,
                   const std::vector<std::vector<DetectionBox>>& gts, double iou_threshold);

/// `image_id class_id confidence cx cy w h`.
std::string format_detection(const std::string& image_id, const DetectionBox& box);
/// Parses format_detection lines; throws ConfigError naming the line.
std::vector<std::pair<std::string, DetectionBox>> parse_detections(const std::string& text);

}  // namespace uavd::detect

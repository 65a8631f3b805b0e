#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "uavd/checkpoint.hpp"
#include "uavd/data.hpp"

// SGD training loop, inference and evaluation over a loaded dataset.

namespace uavd::train {

struct TrainConfig {
  network::ModelConfig model = network::ModelConfig::tiny();
  detect::LossWeights loss{};
  double lr0 = 0.01;
  double lrf = 0.0001;
  double momentum = 0.937;
  double weight_decay = 0.0005;
  Index batch = 8;
  Index steps = 2000;
  std::uint64_t seed = 0;
  bool mosaic = false;
  Index close_mosaic_epochs = 10;  // mosaic is off for the final epochs

  /// Reads training keys and forwards the rest to the model config. Throws
  /// ConfigError on unknown keys.
  void apply(network::KeyValues kv);
  std::string to_text() const;
  void validate() const;
};

/// Cosine annealing from lr0 at step 0 to lrf at the last step.
double learning_rate(const TrainConfig& cfg, Index step);

struct StepLog {
  Index step = 0;
  double total = 0, cls = 0, box = 0, dfl = 0, lr = 0;
  std::string line() const;  // `step total cls box dfl lr`
};

/// Called after every step; returning false stops training early.
using StepCallback = std::function<bool(const StepLog&)>;

/// Momentum SGD, v = mu * v + g + wd * w (weight decay on weights of rank >= 2
/// only), w -= lr * v. Batches draw scenes in a seeded per-epoch permutation.
/// Throws NumericError naming the step when the loss stops being finite.
template <typename T>
ParameterStore<T> train(const TrainConfig& cfg, const std::vector<data::Sample>& samples,
                        const StepCallback& on_step = {});

/// Runs the full detector on each sample in batches and decodes detections.
template <typename T>
std::vector<std::vector<detect::DetectionBox>> infer(const ParameterStore<T>& params,
                                                     const network::ModelConfig& cfg,
                                                     const std::vector<data::Sample>& samples, double conf,
                                                     double nms_iou, Index batch = 8);

std::vector<std::vector<detect::DetectionBox>> ground_truth(const std::vector<data::Sample>& samples);

}  // namespace uavd::train

#include "uavd/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

namespace uavd::train {

namespace {

Index to_index(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return static_cast<Index>(x);
  } catch (const std::exception&) {
  }
  throw ConfigError("config key " + key + " expects an integer, got '" + v + "'");
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key " + key + " expects a number, got '" + v + "'");
}

}  // namespace

void TrainConfig::apply(network::KeyValues kv) {
  auto real = [&](const char* key, double& field) {
    if (auto it = kv.find(key); it != kv.end()) {
      field = to_real(key, it->second);
      kv.erase(it);
    }
  };
  auto integer = [&](const char* key, Index& field) {
    if (auto it = kv.find(key); it != kv.end()) {
      field = to_index(key, it->second);
      kv.erase(it);
    }
  };
  if (auto it = kv.find("model"); it != kv.end()) {
    if (it->second == "tiny") {
      model = network::ModelConfig::tiny();
    } else if (it->second == "desk") {
      model = network::ModelConfig::desk();
    } else if (it->second == "paper_scale") {
      model = network::ModelConfig::paper_scale();
    } else {
      throw ConfigError("model must be tiny, desk or paper_scale, got '" + it->second + "'");
    }
    kv.erase(it);
  }
  real("lr0", lr0);
  real("lrf", lrf);
  real("momentum", momentum);
  real("weight_decay", weight_decay);
  real("lambda_cls", loss.cls);
  real("lambda_box", loss.box);
  real("lambda_dfl", loss.dfl);
  integer("batch", batch);
  integer("steps", steps);
  integer("close_mosaic", close_mosaic_epochs);
  Index seed_value = static_cast<Index>(seed), mosaic_flag = mosaic ? 1 : 0;
  integer("seed", seed_value);
  integer("mosaic", mosaic_flag);
  seed = static_cast<std::uint64_t>(seed_value);
  mosaic = mosaic_flag != 0;
  model.apply(kv);
  if (!kv.empty()) throw ConfigError("unknown config key " + kv.begin()->first);
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "lr0 = " << lr0 << "\nlrf = " << lrf << "\nmomentum = " << momentum << "\nweight_decay = " << weight_decay
     << "\nlambda_cls = " << loss.cls << "\nlambda_box = " << loss.box << "\nlambda_dfl = " << loss.dfl
     << "\nbatch = " << batch << "\nsteps = " << steps << "\nseed = " << seed << "\nmosaic = " << (mosaic ? 1 : 0)
     << "\nclose_mosaic = " << close_mosaic_epochs << '\n'
     << model.to_text();
  return os.str();
}

void TrainConfig::validate() const {
  model.validate();
  if (batch < 1 || steps < 1) throw ConfigError("batch and steps must be positive");
  if (!(lr0 > 0) || !(lrf > 0) || momentum < 0 || momentum >= 1 || weight_decay < 0) {
    throw ConfigError("optimizer settings out of range");
  }
}

double learning_rate(const TrainConfig& cfg, Index step) {
  if (cfg.steps <= 1) return cfg.lr0;
  const double t = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.lrf + (cfg.lr0 - cfg.lrf) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::string StepLog::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld %.6f %.6f %.6f %.6f %.8f", static_cast<long long>(step), total, cls, box, dfl,
                lr);
  return buf;
}

std::vector<std::vector<detect::DetectionBox>> ground_truth(const std::vector<data::Sample>& samples) {
  std::vector<std::vector<detect::DetectionBox>> out;
  for (const auto& s : samples) out.push_back(s.boxes);
  return out;
}

template <typename T>
ParameterStore<T> train(const TrainConfig& cfg, const std::vector<data::Sample>& samples,
                        const StepCallback& on_step) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("training needs at least one sample");
  ParameterStore<T> params;
  CounterRng init_rng(cfg.seed, 1);
  detect::add_detector_params(params, cfg.model, init_rng);
  std::vector<std::vector<T>> velocity;
  for (const auto& [name, t] : params.entries()) velocity.emplace_back(static_cast<std::size_t>(t.size()), T(0));

  const Index n = static_cast<Index>(samples.size());
  const Index steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const Index epochs = (cfg.steps + steps_per_epoch - 1) / steps_per_epoch;
  CounterRng order_rng(cfg.seed, 2);
  CounterRng mosaic_rng(cfg.seed, 3);
  std::vector<Index> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), Index(0));
      for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.below(i + 1)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<data::Sample> mosaics;
  for (Index step = 0; step < cfg.steps; ++step) {
    const Index epoch = step / steps_per_epoch;
    const bool use_mosaic = cfg.mosaic && epoch < epochs - cfg.close_mosaic_epochs;
    std::vector<const data::Sample*> batch;
    mosaics.clear();
    mosaics.reserve(static_cast<std::size_t>(cfg.batch));
    for (Index b = 0; b < cfg.batch; ++b) {
      const data::Sample& s = samples[next_index()];
      if (use_mosaic) {
        mosaics.push_back(data::mosaic(s, samples[mosaic_rng.below(n)], samples[mosaic_rng.below(n)],
                                       samples[mosaic_rng.below(n)]));
        batch.push_back(&mosaics.back());
      } else {
        batch.push_back(&s);
      }
    }
    std::vector<std::vector<detect::DetectionBox>> gts;
    for (const auto* s : batch) gts.push_back(s->boxes);

    detect::LossResult<T> loss;
    try {
      const auto preds = detect::detector_forward(data::to_pair<T>(batch), params, cfg.model);
      const auto grids = detect::grids_of(preds);
      std::vector<detect::Assignment> assignments;
      for (const auto& g : gts) assignments.push_back(detect::assign_targets(g, grids));
      loss = detect::total_loss(preds, assignments, gts, cfg.loss);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    params.zero_grad();
    backward(loss.total);

    const double lr = learning_rate(cfg, step);
    const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), lr_t = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
      Tensor<T> t = params.entries()[i].second;
      const auto g = t.grad();
      auto w = t.mutable_data();
      auto& v = velocity[i];
      const bool decay = t.rank() >= 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        T grad = g.empty() ? T(0) : g[j];
        if (decay) grad += wd * w[j];
        v[j] = mu * v[j] + grad;
        w[j] -= lr_t * v[j];
      }
    }
    StepLog log{step, static_cast<double>(loss.total.item()), loss.cls, loss.box, loss.dfl, lr};
    if (on_step && !on_step(log)) break;
  }
  params.zero_grad();
  return params;
}

template <typename T>
std::vector<std::vector<detect::DetectionBox>> infer(const ParameterStore<T>& params,
                                                     const network::ModelConfig& cfg,
                                                     const std::vector<data::Sample>& samples, double conf,
                                                     double nms_iou, Index batch) {
  NoGradGuard guard;
  std::vector<std::vector<detect::DetectionBox>> out;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    std::vector<const data::Sample*> chunk;
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch)); ++i) {
      chunk.push_back(&samples[i]);
    }
    const auto preds = detect::detector_forward(data::to_pair<T>(chunk), params, cfg);
    for (auto& dets : detect::decode_boxes(preds, conf, nms_iou)) out.push_back(std::move(dets));
  }
  return out;
}

#define UAVD_INSTANTIATE(T)                                                                            \
  template ParameterStore<T> train<T>(const TrainConfig&, const std::vector<data::Sample>&,           \
                                      const StepCallback&);                                           \
  template std::vector<std::vector<detect::DetectionBox>> infer<T>(                                   \
      const ParameterStore<T>&, const network::ModelConfig&, const std::vector<data::Sample>&, double, \
      double, Index);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::train

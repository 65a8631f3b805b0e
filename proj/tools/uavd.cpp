// Command-line front end: synth, train, infer, eval, viz, check.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "uavd/checks.hpp"
#include "uavd/parallel.hpp"
#include "uavd/train.hpp"
#include "uavd/viz.hpp"

namespace {

using namespace uavd;

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string ckpt;
  std::optional<double> conf;
  double nms_iou = 0.5;
  int threads = 1;
  bool f64 = false;
};

constexpr double kVizConf = 0.6;
constexpr double kEvalConf = 0.001;

train::TrainConfig load_train_config(const Options& o) {
  train::TrainConfig cfg;
  if (!o.config.empty()) cfg.apply(network::load_key_values(o.config));
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

int cmd_synth(const Options& o, int count, int size) {
  require(o.data, "--data");
  data::synth_dataset(o.data, o.seed.value_or(0), count, size);
  std::printf("wrote %d scenes of %dx%d to %s\n", count, size, size, o.data.c_str());
  return kOk;
}

template <typename T>
int run_train(const Options& o, const std::string& log_path) {
  require(o.data, "--data");
  require(o.ckpt, "--ckpt");
  const auto cfg = load_train_config(o);
  const auto samples = data::load_dataset(o.data, static_cast<int>(cfg.model.num_classes));
  std::FILE* log = nullptr;
  if (!log_path.empty()) {
    log = std::fopen(log_path.c_str(), "w");
    if (!log) throw IoError("cannot write " + log_path);
  }
  const auto params = train::train<T>(cfg, samples, [&](const train::StepLog& s) {
    const auto line = s.line();
    std::printf("%s\n", line.c_str());
    if (log) std::fprintf(log, "%s\n", line.c_str());
    return true;
  });
  if (log) std::fclose(log);
  checkpoint::save(o.ckpt, params, cfg.model);
  return kOk;
}

/// A dataset directory, or a single pair given by --rgb/--ir.
std::vector<data::Sample> load_inputs(const Options& o, const std::string& rgb, const std::string& ir,
                                      int num_classes) {
  if (!rgb.empty() || !ir.empty()) {
    require(rgb, "--rgb");
    require(ir, "--ir");
    data::Sample s;
    s.id = std::filesystem::path(rgb).stem().string();
    s.rgb = data::read_pnm(rgb);
    s.ir = data::read_pnm(ir);
    return {s};
  }
  require(o.data, "--data (or --rgb and --ir)");
  return data::load_dataset(o.data, num_classes);
}

template <typename T>
std::vector<std::vector<detect::DetectionBox>> detections(const Options& o, const checkpoint::Checkpoint<T>& ck,
                                                          const std::vector<data::Sample>& samples, double conf) {
  return train::infer(ck.params, ck.config, samples, conf, o.nms_iou);
}

template <typename T>
int run_infer(const Options& o, const std::string& rgb, const std::string& ir) {
  require(o.ckpt, "--ckpt");
  const auto ck = checkpoint::load<T>(o.ckpt);
  const auto samples = load_inputs(o, rgb, ir, static_cast<int>(ck.config.num_classes));
  const auto dets = detections(o, ck, samples, o.conf.value_or(kVizConf));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& d : dets[i]) std::printf("%s\n", detect::format_detection(samples[i].id, d).c_str());
  }
  return kOk;
}

template <typename T>
int run_eval(const Options& o, const std::string& dets_path, double iou) {
  require(o.data, "--data");
  std::vector<std::vector<detect::DetectionBox>> dets;
  std::vector<data::Sample> samples;
  if (!dets_path.empty()) {
    samples = data::load_dataset(o.data, static_cast<int>(load_train_config(o).model.num_classes));
    dets.resize(samples.size());
    for (const auto& [id, box] : detect::parse_detections(data::read_text(dets_path))) {
      auto it = std::find_if(samples.begin(), samples.end(), [&](const data::Sample& s) { return s.id == id; });
      if (it == samples.end()) throw ConfigError("detection for unknown image id " + id);
      dets[static_cast<std::size_t>(it - samples.begin())].push_back(box);
    }
  } else {
    require(o.ckpt, "--ckpt (or --dets)");
    const auto ck = checkpoint::load<T>(o.ckpt);
    samples = data::load_dataset(o.data, static_cast<int>(ck.config.num_classes));
    dets = detections(o, ck, samples, o.conf.value_or(kEvalConf));
  }
  std::printf("%s", detect::eval_map(dets, train::ground_truth(samples), iou).to_text().c_str());
  return kOk;
}

template <typename T>
int run_viz(const Options& o, const std::string& rgb, const std::string& ir, const std::string& out,
            std::size_t tokens) {
  require(o.ckpt, "--ckpt");
  require(out, "--out");
  const auto ck = checkpoint::load<T>(o.ckpt);
  const auto samples = load_inputs(o, rgb, ir, static_cast<int>(ck.config.num_classes));
  const auto report = viz::visualize_patches(ck.params, ck.config, samples.front(), tokens);
  data::write_pnm(out, report.image);
  std::printf("tokens %zu max_shift_px %.6f tokens_over_1px %zu\n", report.all.size(), report.max_shift(),
              report.tokens_beyond(1.0));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-IR deformable-token Mamba detector"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "key = value config file");
  app.add_option("--seed", o.seed, "RNG seed");
  app.add_option("--data", o.data, "dataset directory");
  app.add_option("--ckpt", o.ckpt, "checkpoint path");
  app.add_option("--conf", o.conf, "confidence threshold (infer 0.6, eval 0.001)");
  app.add_option("--nms-iou", o.nms_iou, "NMS IoU threshold")->capture_default_str();
  app.add_option("--threads", o.threads, "OpenMP threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--f64", o.f64, "64-bit arithmetic");

  int count = 8, size = 128;
  auto* synth = app.add_subcommand("synth", "write a synthetic RGB-IR dataset");
  synth->add_option("-n,--count", count, "number of scenes")->capture_default_str();
  synth->add_option("--size", size, "image side, a multiple of 64")->capture_default_str();

  std::string log_path;
  auto* train_cmd = app.add_subcommand("train", "train a detector and write a checkpoint");
  train_cmd->add_option("--log", log_path, "also write step lines to this file");

  std::string rgb, ir, out, dets_path;
  double eval_iou = 0.5;
  std::size_t tokens = 16;
  auto* infer = app.add_subcommand("infer", "print detections: image_id class conf cx cy w h");
  infer->add_option("--rgb", rgb, "RGB image (PPM)");
  infer->add_option("--ir", ir, "IR image (PGM)");
  auto* eval = app.add_subcommand("eval", "mAP over a dataset");
  eval->add_option("--dets", dets_path, "detection file instead of running the checkpoint");
  eval->add_option("--iou", eval_iou, "match IoU threshold")->capture_default_str();
  auto* viz_cmd = app.add_subcommand("viz", "draw normal and adaptive sampling patches");
  viz_cmd->add_option("--rgb", rgb, "RGB image (PPM)");
  viz_cmd->add_option("--ir", ir, "IR image (PGM)");
  viz_cmd->add_option("--out", out, "output PPM");
  viz_cmd->add_option("--tokens", tokens, "number of tokens drawn")->capture_default_str();
  auto* check = app.add_subcommand("check", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  set_threads(o.threads);
  try {
    if (*synth) return cmd_synth(o, count, size);
    if (*train_cmd) return o.f64 ? run_train<double>(o, log_path) : run_train<float>(o, log_path);
    if (*infer) return o.f64 ? run_infer<double>(o, rgb, ir) : run_infer<float>(o, rgb, ir);
    if (*eval) return o.f64 ? run_eval<double>(o, dets_path, eval_iou) : run_eval<float>(o, dets_path, eval_iou);
    if (*viz_cmd) return o.f64 ? run_viz<double>(o, rgb, ir, out, tokens) : run_viz<float>(o, rgb, ir, out, tokens);
    if (*check) return checks::run_checks({}, &std::cout).all_passed() ? kOk : kCheckFailed;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const AlignmentError& e) {
    std::fprintf(stderr, "alignment error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kIo;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kCheckFailed;
  }
  return kUsage;
}

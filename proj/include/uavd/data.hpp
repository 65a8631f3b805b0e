#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uavd/detect.hpp"

// Binary PPM/PGM images, the seeded synthetic RGB-IR scene generator and
// dataset loading.

namespace uavd::data {

/// Interleaved 8-bit image; channels is 3 (RGB) or 1 (gray).
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Writes P6 for 3 channels, P5 for 1. Throws IoError.
void write_pnm(const std::string& path, const Image& image);
/// Reads binary P6/P5 with maxval 255. Throws IoError.
Image read_pnm(const std::string& path);

enum class Shape2D { rectangle, ellipse };

struct SceneObject {
  Shape2D shape = Shape2D::rectangle;
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized
  bool visible_rgb = true;
  bool visible_ir = true;
};

struct SynthScene {
  std::uint64_t seed = 0;
  int size = 0;
  bool night = false;
  std::vector<SceneObject> objects;
  Image rgb;
  Image ir;

  std::vector<detect::DetectionBox> boxes() const;
};

inline constexpr int kSynthClasses = 5;

/// Class c always has the same shape, RGB color and IR intensity.
Shape2D class_shape(int class_id);

/// Deterministic in (seed, index, size). Night scenes darken the RGB image so
/// their objects are IR-only; day scenes may contain objects without a thermal
/// signature. Every object stays visible in at least one modality.
SynthScene render_scene(std::uint64_t seed, int index, int size);

/// Writes scene_XXXX_rgb.ppm, scene_XXXX_ir.pgm, scene_XXXX.txt and index.txt.
/// Throws ConfigError unless size is a positive multiple of 64.
void synth_dataset(const std::string& dir, std::uint64_t seed, int n, int size);

/// `class cx cy w h` per line.
std::string format_labels(const std::vector<detect::DetectionBox>& boxes);
std::vector<detect::DetectionBox> parse_labels(const std::string& text, int num_classes);

struct Sample {
  std::string id;
  Image rgb;
  Image ir;
  std::vector<detect::DetectionBox> boxes;
};

/// Reads index.txt (`rgb_path ir_path label_path` per line, relative to dir)
/// and every listed sample. Throws IoError / ConfigError.
std::vector<Sample> load_dataset(const std::string& dir, int num_classes);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

/// Stacks samples into an ImagePair scaled to [0, 1]; all images must share
/// the same size.
template <typename T>
network::ImagePair<T> to_pair(const std::vector<const Sample*>& batch);

/// Four samples tiled 2x2 and downscaled 2x into one sample of the same size;
/// boxes follow, and boxes shrunk below two pixels are dropped.
Sample mosaic(const Sample& a, const Sample& b, const Sample& c, const Sample& d);

}  // namespace uavd::data

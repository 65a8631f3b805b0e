#include "uavd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace uavd::data {

namespace fs = std::filesystem;

void write_pnm(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ConfigError("write_pnm: unsupported channel count");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!f) throw IoError("write failed for " + path);
}

namespace {

// Next whitespace-separated header token, skipping # comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  const std::string magic = header_token(f);
  Image img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw IoError(path + ": not a binary PPM/PGM");
  }
  try {
    img.width = std::stoi(header_token(f));
    img.height = std::stoi(header_token(f));
    if (std::stoi(header_token(f)) != 255) throw IoError(path + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path + ": malformed header");
  }
  if (img.width <= 0 || img.height <= 0) throw IoError(path + ": bad dimensions");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError(path + ": truncated pixel data");
  return img;
}

std::vector<detect::DetectionBox> SynthScene::boxes() const {
  std::vector<detect::DetectionBox> out;
  for (const auto& o : objects) {
    detect::DetectionBox b;
    b.cx = o.cx;
    b.cy = o.cy;
    b.w = o.w;
    b.h = o.h;
    b.class_id = o.class_id;
    out.push_back(b);
  }
  return out;
}

namespace {

struct ClassStyle {
  Shape2D shape;
  double r, g, b;  // RGB color in [0, 1]
  double heat;     // IR intensity in [0, 1]
};

constexpr std::array<ClassStyle, kSynthClasses> kStyles{{
    {Shape2D::rectangle, 0.86, 0.16, 0.16, 0.95},
    {Shape2D::rectangle, 0.16, 0.31, 0.90, 0.60},
    {Shape2D::ellipse, 0.16, 0.78, 0.24, 0.85},
    {Shape2D::ellipse, 0.90, 0.82, 0.16, 0.50},
    {Shape2D::rectangle, 0.16, 0.82, 0.86, 0.75},
}};

bool inside(const SceneObject& o, double x, double y) {
  const double dx = (x - o.cx) / (o.w / 2), dy = (y - o.cy) / (o.h / 2);
  if (o.shape == Shape2D::rectangle) return std::abs(dx) <= 1 && std::abs(dy) <= 1;
  return dx * dx + dy * dy <= 1;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

double overlap(const SceneObject& a, const SceneObject& b) {
  detect::DetectionBox x{a.cx, a.cy, a.w, a.h, 0, 1}, y{b.cx, b.cy, b.w, b.h, 0, 1};
  return detect::iou(x, y);
}

}  // namespace

Shape2D class_shape(int class_id) { return kStyles.at(static_cast<std::size_t>(class_id)).shape; }

SynthScene render_scene(std::uint64_t seed, int index, int size) {
  CounterRng rng(seed, static_cast<std::uint64_t>(index));
  SynthScene s;
  s.seed = seed;
  s.size = size;
  s.night = rng.uniform() < 0.3;
  const int count = 1 + static_cast<int>(rng.below(3));
  for (int attempt = 0; attempt < 60 && static_cast<int>(s.objects.size()) < count; ++attempt) {
    SceneObject o;
    o.class_id = static_cast<int>(rng.below(kSynthClasses));
    o.shape = class_shape(o.class_id);
    o.w = rng.uniform(0.14, 0.42);
    o.h = rng.uniform(0.14, 0.42);
    o.cx = rng.uniform(o.w / 2, 1 - o.w / 2);
    o.cy = rng.uniform(o.h / 2, 1 - o.h / 2);
    const bool cold = rng.uniform() < 0.25;
    if (std::any_of(s.objects.begin(), s.objects.end(), [&](const SceneObject& p) { return overlap(o, p) > 0.1; })) {
      continue;
    }
    o.visible_rgb = !s.night;
    o.visible_ir = s.night || !cold;
    s.objects.push_back(o);
  }

  // Background: two random gratings plus a color cast; clutter strokes in gray.
  const double base_r = rng.uniform(0.3, 0.55), base_g = rng.uniform(0.3, 0.55), base_b = rng.uniform(0.25, 0.45);
  const double f1 = rng.uniform(4, 14), f2 = rng.uniform(4, 14), ph1 = rng.uniform(0, 6.3), ph2 = rng.uniform(0, 6.3);
  const double ang = rng.uniform(0, std::numbers::pi);
  struct Stroke {
    double x1, y1, x2, y2, shade;
  };
  std::vector<Stroke> clutter;
  const int n_clutter = 3 + static_cast<int>(rng.below(4));
  for (int i = 0; i < n_clutter; ++i) {
    const double x = rng.uniform(0, 1), y = rng.uniform(0, 1);
    clutter.push_back({x, y, x + rng.uniform(0.01, 0.06), y + rng.uniform(0.01, 0.06), rng.uniform(0.2, 0.8)});
  }
  const double ir_base = rng.uniform(0.08, 0.2), ir_slope = rng.uniform(-0.08, 0.08);
  const double dim = s.night ? 0.12 : 1.0;

  s.rgb = Image{size, size, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  s.ir = Image{size, size, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      const double x = (px + 0.5) / size, y = (py + 0.5) / size;
      const double u = x * std::cos(ang) + y * std::sin(ang), v = -x * std::sin(ang) + y * std::cos(ang);
      const double tex = 0.08 * std::sin(2 * std::numbers::pi * f1 * u + ph1) +
                         0.05 * std::sin(2 * std::numbers::pi * f2 * v + ph2) + rng.uniform(-0.04, 0.04);
      double r = base_r + tex, g = base_g + tex, b = base_b + tex;
      for (const auto& c : clutter) {
        if (x >= c.x1 && x <= c.x2 && y >= c.y1 && y <= c.y2) r = g = b = c.shade;
      }
      double heat = ir_base + ir_slope * (x - 0.5);
      for (const auto& o : s.objects) {
        if (!inside(o, x, y)) continue;
        const auto& st = kStyles[static_cast<std::size_t>(o.class_id)];
        r = st.r + 0.3 * tex;
        g = st.g + 0.3 * tex;
        b = st.b + 0.3 * tex;
        if (o.visible_ir) {
          const double dx = (x - o.cx) / (o.w / 2), dy = (y - o.cy) / (o.h / 2);
          heat = st.heat * (1.0 - 0.15 * std::min(1.0, dx * dx + dy * dy));
        }
      }
      s.rgb.at(px, py, 0) = to_byte(r * dim);
      s.rgb.at(px, py, 1) = to_byte(g * dim);
      s.rgb.at(px, py, 2) = to_byte(b * dim);
      s.ir.at(px, py, 0) = to_byte(heat);
    }
  }
  return s;
}

std::string format_labels(const std::vector<detect::DetectionBox>& boxes) {
  std::string out;
  char buf[128];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", b.class_id, b.cx, b.cy, b.w, b.h);
    out += buf;
  }
  return out;
}

std::vector<detect::DetectionBox> parse_labels(const std::string& text, int num_classes) {
  std::vector<detect::DetectionBox> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    detect::DetectionBox b;
    std::string extra;
    if (!(fields >> b.class_id >> b.cx >> b.cy >> b.w >> b.h) || (fields >> extra)) {
      throw ConfigError("label line " + std::to_string(line_no) + " malformed: " + line);
    }
    b.validate(num_classes);
    out.push_back(b);
  }
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed for " + path);
}

void synth_dataset(const std::string& dir, std::uint64_t seed, int n, int size) {
  if (size <= 0 || size % 64 != 0) throw ConfigError("image size " + std::to_string(size) + " must be a multiple of 64");
  if (n < 0) throw ConfigError("scene count must be non-negative");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  std::string index;
  char name[32];
  for (int i = 0; i < n; ++i) {
    std::snprintf(name, sizeof name, "scene_%04d", i);
    const std::string stem = name;
    const SynthScene s = render_scene(seed, i, size);
    write_pnm((fs::path(dir) / (stem + "_rgb.ppm")).string(), s.rgb);
    write_pnm((fs::path(dir) / (stem + "_ir.pgm")).string(), s.ir);
    write_text((fs::path(dir) / (stem + ".txt")).string(), format_labels(s.boxes()));
    index += stem + "_rgb.ppm " + stem + "_ir.pgm " + stem + ".txt\n";
  }
  write_text((fs::path(dir) / "index.txt").string(), index);
}

std::vector<Sample> load_dataset(const std::string& dir, int num_classes) {
  const std::string index = read_text((fs::path(dir) / "index.txt").string());
  std::vector<Sample> out;
  std::istringstream in(index);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string rgb, ir, labels;
    if (!(fields >> rgb >> ir >> labels)) {
      throw ConfigError("index line " + std::to_string(line_no) + " needs rgb, ir and label paths");
    }
    Sample s;
    s.id = fs::path(labels).stem().string();
    s.rgb = read_pnm((fs::path(dir) / rgb).string());
    s.ir = read_pnm((fs::path(dir) / ir).string());
    if (s.rgb.channels != 3 || s.ir.channels != 1) throw IoError(s.id + ": expected an RGB PPM and a gray PGM");
    if (s.rgb.width != s.ir.width || s.rgb.height != s.ir.height) {
      throw AlignmentError(s.id + ": RGB and IR images differ in size");
    }
    s.boxes = parse_labels(read_text((fs::path(dir) / labels).string()), num_classes);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
network::ImagePair<T> to_pair(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ConfigError("empty batch");
  const Index B = static_cast<Index>(batch.size()), H = batch[0]->rgb.height, W = batch[0]->rgb.width;
  std::vector<T> rgb(static_cast<std::size_t>(B * 3 * H * W)), ir(static_cast<std::size_t>(B * H * W));
  for (Index b = 0; b < B; ++b) {
    const Sample& s = *batch[b];
    if (s.rgb.height != H || s.rgb.width != W || s.ir.height != H || s.ir.width != W) {
      throw AlignmentError("batch images differ in size at " + s.id);
    }
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        for (Index c = 0; c < 3; ++c) {
          rgb[((b * 3 + c) * H + y) * W + x] = static_cast<T>(s.rgb.at(static_cast<int>(x), static_cast<int>(y), static_cast<int>(c)) / 255.0);
        }
        ir[(b * H + y) * W + x] = static_cast<T>(s.ir.at(static_cast<int>(x), static_cast<int>(y), 0) / 255.0);
      }
  }
  return {Tensor<T>::from({B, 3, H, W}, std::move(rgb)), Tensor<T>::from({B, 1, H, W}, std::move(ir))};
}

namespace {

void tile_half(const Image& src, Image& dst, int ox, int oy) {
  for (int y = 0; y < src.height / 2; ++y)
    for (int x = 0; x < src.width / 2; ++x)
      for (int c = 0; c < src.channels; ++c) {
        const int sum = src.at(2 * x, 2 * y, c) + src.at(2 * x + 1, 2 * y, c) + src.at(2 * x, 2 * y + 1, c) +
                        src.at(2 * x + 1, 2 * y + 1, c);
        dst.at(ox + x, oy + y, c) = static_cast<std::uint8_t>((sum + 2) / 4);
      }
}

}  // namespace

Sample mosaic(const Sample& a, const Sample& b, const Sample& c, const Sample& d) {
  const std::array<const Sample*, 4> parts{&a, &b, &c, &d};
  const int W = a.rgb.width, H = a.rgb.height;
  Sample out;
  out.id = a.id + "+mosaic";
  out.rgb = Image{W, H, 3, std::vector<std::uint8_t>(a.rgb.pixels.size())};
  out.ir = Image{W, H, 1, std::vector<std::uint8_t>(a.ir.pixels.size())};
  for (int i = 0; i < 4; ++i) {
    const Sample& s = *parts[i];
    if (s.rgb.width != W || s.rgb.height != H) throw AlignmentError("mosaic inputs differ in size");
    const int ox = (i % 2) * W / 2, oy = (i / 2) * H / 2;
    tile_half(s.rgb, out.rgb, ox, oy);
    tile_half(s.ir, out.ir, ox, oy);
    for (auto box : s.boxes) {
      box.cx = box.cx / 2 + (i % 2) * 0.5;
      box.cy = box.cy / 2 + (i / 2) * 0.5;
      box.w /= 2;
      box.h /= 2;
      if (box.w * W >= 2 && box.h * H >= 2) out.boxes.push_back(box);
    }
  }
  return out;
}

template network::ImagePair<float> to_pair<float>(const std::vector<const Sample*>&);
template network::ImagePair<double> to_pair<double>(const std::vector<const Sample*>&);

}  // namespace uavd::data

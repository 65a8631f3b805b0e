#include "uavd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "uavd/data.hpp"
#include "uavd/detect.hpp"

namespace uavd::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr const char* kMagic = "UAVDCKPT";

}  // namespace

template <typename T>
std::string serialize(const ParameterStore<T>& params, const network::ModelConfig& cfg) {
  const std::string config = cfg.to_text();
  std::ostringstream os(std::ios::binary);
  os << kMagic << " 1 f32 " << params.size() << ' ' << config.size() << '\n' << config;
  for (const auto& [name, t] : params.entries()) {
    os << name << ' ' << t.rank();
    for (Index d : t.shape()) os << ' ' << d;
    os << '\n';
    const auto v = t.data();
    std::vector<float> payload(v.begin(), v.end());
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
  }
  return os.str();
}

template <typename T>
void save(const std::string& path, const ParameterStore<T>& params, const network::ModelConfig& cfg) {
  data::write_text(path, serialize(params, cfg));
}

template <typename T>
Checkpoint<T> deserialize(const std::string& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos) throw CheckpointError(origin + ": truncated header");
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    return line;
  };
  std::istringstream head(next_line());
  std::string magic, dtype;
  int version = 0;
  Index count = 0;
  std::size_t config_bytes = 0;
  if (!(head >> magic >> version >> dtype >> count >> config_bytes) || magic != kMagic || version != 1 ||
      dtype != "f32") {
    throw CheckpointError(origin + ": not a version-1 checkpoint");
  }
  if (pos + config_bytes > bytes.size()) throw CheckpointError(origin + ": truncated config block");
  auto kv = network::parse_key_values(bytes.substr(pos, config_bytes));
  pos += config_bytes;
  Checkpoint<T> out;
  out.config.apply(kv);
  if (!kv.empty()) throw CheckpointError(origin + ": unknown config key " + kv.begin()->first);
  out.config.validate();
  CounterRng layout_rng(0);
  detect::add_detector_params(out.params, out.config, layout_rng);

  const auto& entries = out.params.entries();
  if (count != static_cast<Index>(entries.size())) {
    const std::string first = count < static_cast<Index>(entries.size()) ? entries[count].first : "<extra tensors>";
    throw CheckpointError(origin + ": holds " + std::to_string(count) + " tensors, layout needs " +
                          std::to_string(entries.size()) + "; first offending tensor " + first);
  }
  for (Index i = 0; i < count; ++i) {
    const auto& [want_name, tensor] = entries[i];
    std::istringstream line(next_line());
    std::string name;
    Index rank = 0;
    line >> name >> rank;
    Shape shape(static_cast<std::size_t>(std::max<Index>(rank, 0)));
    for (auto& d : shape) line >> d;
    if (!line || name != want_name || shape != tensor.shape()) {
      throw CheckpointError(origin + ": tensor " + std::to_string(i) + " is " + name + " " + to_string(shape) +
                            ", layout expects " + want_name + " " + to_string(tensor.shape()));
    }
    const std::size_t n = static_cast<std::size_t>(numel(shape)) * sizeof(float);
    if (pos + n > bytes.size()) throw CheckpointError(origin + ": truncated data for " + name);
    auto dst = out.params.at(name).mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      float v;
      std::memcpy(&v, bytes.data() + pos + j * sizeof(float), sizeof(float));
      dst[j] = static_cast<T>(v);
    }
    pos += n;
  }
  if (pos != bytes.size()) throw CheckpointError(origin + ": trailing bytes after the last tensor");
  return out;
}

template <typename T>
Checkpoint<T> load(const std::string& path) {
  return deserialize<T>(data::read_text(path), path);
}

#define UAVD_INSTANTIATE(T)                                                                   \
  template std::string serialize<T>(const ParameterStore<T>&, const network::ModelConfig&);   \
  template void save<T>(const std::string&, const ParameterStore<T>&, const network::ModelConfig&); \
  template Checkpoint<T> deserialize<T>(const std::string&, const std::string&);              \
  template Checkpoint<T> load<T>(const std::string&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::checkpoint

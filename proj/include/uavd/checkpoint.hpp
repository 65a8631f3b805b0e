#pragma once

#include <string>

#include "uavd/network.hpp"

// Named-tensor checkpoint container:
//   UAVDCKPT 1 f32 <tensor count> <config bytes>\n
//   <config text, key = value lines>
//   then per tensor: `<name> <rank> <d0> ... <dk>\n` followed by the raw
//   little-endian float32 values in row-major order.

namespace uavd::checkpoint {

template <typename T>
struct Checkpoint {
  network::ModelConfig config;
  ParameterStore<T> params;
};

/// Serializes in store order; 64-bit parameters are rounded to float32.
/// Throws IoError.
template <typename T>
void save(const std::string& path, const ParameterStore<T>& params, const network::ModelConfig& cfg);

template <typename T>
std::string serialize(const ParameterStore<T>& params, const network::ModelConfig& cfg);

/// Reads a checkpoint, rebuilds the detector layout from its config and
/// copies every tensor in. Throws CheckpointError naming the first tensor
/// whose name or shape differs from the layout, IoError on read failures.
template <typename T>
Checkpoint<T> load(const std::string& path);

template <typename T>
Checkpoint<T> deserialize(const std::string& bytes, const std::string& origin = "<memory>");

}  // namespace uavd::checkpoint

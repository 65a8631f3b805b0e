#pragma once

#include <string>

#include "uavd/rng.hpp"
#include "uavd/tensor.hpp"

// Parameter creation helpers. Weights and biases draw from
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

namespace uavd {

enum class Init { uniform, zeros };

/// Adds `<name>.weight` [cout, cin, k, k] and `<name>.bias` [cout].
template <typename T>
void add_conv(ParameterStore<T>& store, const std::string& name, Index cout, Index cin, Index k,
              CounterRng& rng, Init init = Init::uniform);

/// Adds `<name>.weight` [cout, 1, k, k] and `<name>.bias` [cout].
template <typename T>
void add_depthwise(ParameterStore<T>& store, const std::string& name, Index channels, Index k,
                   CounterRng& rng);

/// Adds `<name>.weight` [dout, din] and, when `with_bias`, `<name>.bias` [dout].
template <typename T>
void add_linear(ParameterStore<T>& store, const std::string& name, Index dout, Index din,
                CounterRng& rng, bool with_bias = true, Init init = Init::uniform);

/// Adds `<name>.weight` = 1 and `<name>.bias` = 0, both [channels].
template <typename T>
void add_norm(ParameterStore<T>& store, const std::string& name, Index channels);

}  // namespace uavd

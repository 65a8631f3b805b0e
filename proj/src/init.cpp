#include "uavd/init.hpp"

#include <cmath>

namespace uavd {

namespace {

template <typename T>
std::vector<T> draw(Index n, Index fan_in, CounterRng& rng, Init init) {
  if (init == Init::zeros) return std::vector<T>(static_cast<std::size_t>(n), T(0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_vector<T>(n, -bound, bound);
}

}  // namespace

template <typename T>
void add_conv(ParameterStore<T>& store, const std::string& name, Index cout, Index cin, Index k,
              CounterRng& rng, Init init) {
  const Index fan_in = cin * k * k;
  store.add(name + ".weight", {cout, cin, k, k}, draw<T>(cout * fan_in, fan_in, rng, init));
  store.add(name + ".bias", {cout}, draw<T>(cout, fan_in, rng, init));
}

template <typename T>
void add_depthwise(ParameterStore<T>& store, const std::string& name, Index channels, Index k,
                   CounterRng& rng) {
  store.add(name + ".weight", {channels, 1, k, k}, draw<T>(channels * k * k, k * k, rng, Init::uniform));
  store.add(name + ".bias", {channels}, draw<T>(channels, k * k, rng, Init::uniform));
}

template <typename T>
void add_linear(ParameterStore<T>& store, const std::string& name, Index dout, Index din,
                CounterRng& rng, bool with_bias, Init init) {
  store.add(name + ".weight", {dout, din}, draw<T>(dout * din, din, rng, init));
  if (with_bias) store.add(name + ".bias", {dout}, draw<T>(dout, din, rng, init));
}

template <typename T>
void add_norm(ParameterStore<T>& store, const std::string& name, Index channels) {
  store.add(name + ".weight", {channels}, std::vector<T>(static_cast<std::size_t>(channels), T(1)));
  store.add(name + ".bias", {channels}, std::vector<T>(static_cast<std::size_t>(channels), T(0)));
}

#define UAVD_INSTANTIATE(T)                                                                    \
  template void add_conv<T>(ParameterStore<T>&, const std::string&, Index, Index, Index,       \
                            CounterRng&, Init);                                                \
  template void add_depthwise<T>(ParameterStore<T>&, const std::string&, Index, Index, CounterRng&); \
  template void add_linear<T>(ParameterStore<T>&, const std::string&, Index, Index, CounterRng&, \
                              bool, Init);                                                     \
  template void add_norm<T>(ParameterStore<T>&, const std::string&, Index);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd

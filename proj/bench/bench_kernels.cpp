// Serial reference kernels vs the OpenMP versions, float32.
// The argument is the OpenMP thread count; serial ignores it.

#include <benchmark/benchmark.h>

#include "uavd/kernels.hpp"
#include "uavd/parallel.hpp"
#include "uavd/rng.hpp"

namespace {

using namespace uavd;
using namespace uavd::kernels;

struct Serial {
  template <typename... A>
  static void conv(A&&... a) { serial::conv2d_forward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static void conv_back(A&&... a) { serial::conv2d_backward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static void deform(A&&... a) { serial::deform_conv2d_forward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static Index scan(A&&... a) { return serial::selective_scan_forward<float>(std::forward<A>(a)...); }
};

struct Parallel {
  template <typename... A>
  static void conv(A&&... a) { parallel::conv2d_forward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static void conv_back(A&&... a) { parallel::conv2d_backward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static void deform(A&&... a) { parallel::deform_conv2d_forward<float>(std::forward<A>(a)...); }
  template <typename... A>
  static Index scan(A&&... a) { return parallel::selective_scan_forward<float>(std::forward<A>(a)...); }
};

// A stage-1 sized layer of the desk model: 32x32 tokens, 16 -> 32 channels.
const ConvGeometry kConv{4, 16, 32, 32, 32, 3, 2, 1};

std::vector<float> draw(CounterRng& rng, Index n, double lo = -1, double hi = 1) {
  return rng.uniform_vector<float>(n, lo, hi);
}

template <typename V>
std::span<const float> cs(const V& v) {
  return {v.data(), v.size()};
}

Index conv_flops(const ConvGeometry& g) {
  return 2 * g.batch * g.out_channels * g.out_height() * g.out_width() * g.in_channels * g.taps();
}

template <typename K>
void BM_conv2d_forward(benchmark::State& state) {
  set_threads(static_cast<int>(state.range(0)));
  const auto& g = kConv;
  CounterRng rng(1);
  const auto in = draw(rng, g.batch * g.in_channels * g.height * g.width);
  const auto w = draw(rng, g.out_channels * g.in_channels * g.taps());
  const auto b = draw(rng, g.out_channels);
  std::vector<float> out(static_cast<std::size_t>(g.batch * g.out_channels * g.out_height() * g.out_width()));
  for (auto _ : state) {
    K::conv(g, cs(in), cs(w), cs(b), std::span<float>(out));
    benchmark::DoNotOptimize(out.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(static_cast<double>(conv_flops(g)) * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

template <typename K>
void BM_conv2d_backward(benchmark::State& state) {
  set_threads(static_cast<int>(state.range(0)));
  const auto& g = kConv;
  CounterRng rng(2);
  const Index nin = g.batch * g.in_channels * g.height * g.width, nw = g.out_channels * g.in_channels * g.taps();
  const auto in = draw(rng, nin), w = draw(rng, nw);
  const auto go = draw(rng, g.batch * g.out_channels * g.out_height() * g.out_width());
  std::vector<float> gi(nin), gw(nw), gb(g.out_channels);
  for (auto _ : state) {
    K::conv_back(g, cs(in), cs(w), cs(go), std::span<float>(gi), std::span<float>(gw), std::span<float>(gb));
    benchmark::DoNotOptimize(gi.data());
  }
}

template <typename K>
void BM_deform_conv2d_forward(benchmark::State& state) {
  set_threads(static_cast<int>(state.range(0)));
  const auto& g = kConv;
  CounterRng rng(3);
  const auto in = draw(rng, g.batch * g.in_channels * g.height * g.width);
  const auto w = draw(rng, g.out_channels * g.in_channels * g.taps());
  const auto b = draw(rng, g.out_channels);
  const auto off = draw(rng, g.batch * 2 * g.taps() * g.out_height() * g.out_width(), -1.5, 1.5);
  std::vector<float> out(static_cast<std::size_t>(g.batch * g.out_channels * g.out_height() * g.out_width()));
  for (auto _ : state) {
    K::deform(g, cs(in), cs(w), cs(b), cs(off), std::span<float>(out));
    benchmark::DoNotOptimize(out.data());
  }
}

template <typename K>
void BM_selective_scan_forward(benchmark::State& state) {
  set_threads(static_cast<int>(state.range(0)));
  const ScanGeometry g{4, 1024, 32, 16};
  CounterRng rng(4);
  const auto u = draw(rng, g.batch * g.length * g.channels);
  const auto delta = draw(rng, g.batch * g.length * g.channels, 0.001, 0.1);
  const auto a_log = draw(rng, g.channels * g.state, 0, 2);
  const auto b = draw(rng, g.batch * g.length * g.state), c = draw(rng, g.batch * g.length * g.state);
  const auto d = draw(rng, g.channels);
  std::vector<float> y(u.size()), states(static_cast<std::size_t>(g.batch * g.channels * g.length * g.state));
  const ScanInputs<float> in{cs(u), cs(delta), cs(a_log), cs(b), cs(c), cs(d)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(K::scan(g, in, std::span<float>(y), std::span<float>(states)));
  }
}

void thread_args(benchmark::internal::Benchmark* b) {
  for (int t = 1; t <= std::max(1, max_threads()); t *= 2) b->Arg(t);
}

}  // namespace

BENCHMARK(BM_conv2d_forward<Serial>)->Arg(1);
BENCHMARK(BM_conv2d_forward<Parallel>)->Apply(thread_args);
BENCHMARK(BM_conv2d_backward<Serial>)->Arg(1);
BENCHMARK(BM_conv2d_backward<Parallel>)->Apply(thread_args);
BENCHMARK(BM_deform_conv2d_forward<Serial>)->Arg(1);
BENCHMARK(BM_deform_conv2d_forward<Parallel>)->Apply(thread_args);
BENCHMARK(BM_selective_scan_forward<Serial>)->Arg(1);
BENCHMARK(BM_selective_scan_forward<Parallel>)->Apply(thread_args);

BENCHMARK_MAIN();

#include "uavd/ssm.hpp"

#include <cmath>

#include "uavd/init.hpp"
#include "uavd/kernels.hpp"

namespace uavd::ssm {

namespace {

// Sequence position t -> flat spatial index y*W + x.
std::vector<Index> traversal(ScanDirection dir, Index H, Index W) {
  const Index L = H * W;
  std::vector<Index> order(static_cast<std::size_t>(L));
  for (Index t = 0; t < L; ++t) {
    switch (dir) {
      case ScanDirection::row_fwd: order[t] = t; break;
      case ScanDirection::row_bwd: order[t] = L - 1 - t; break;
      case ScanDirection::col_fwd: order[t] = (t % H) * W + t / H; break;
      case ScanDirection::col_bwd: {
        const Index s = L - 1 - t;
        order[t] = (s % H) * W + s / H;
        break;
      }
    }
  }
  return order;
}

// out[i] = in[index[i]]; the backward pass scatters.
template <typename T>
Tensor<T> gather(const Tensor<T>& input, Shape out_shape, std::vector<Index> index, const char* op) {
  const auto x = input.data();
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index[i]];
  return make_result<T>(std::move(out_shape), std::move(out), op, {input},
                        [index = std::move(index)](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return conv2d(x, w, b, 1, 0);
}

}  // namespace

template <typename T>
SsmParams<T> SsmParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  return {store.at(prefix + ".A_log"), store.at(prefix + ".D"), store.at(prefix + ".x_proj.weight"),
          store.at(prefix + ".dt_proj.weight"), store.at(prefix + ".dt_proj.bias")};
}

template <typename T>
void SsmParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index inner, Index state,
                       Index rank, CounterRng& rng) {
  // S4D-real init: A_log[d, n] = log(n + 1).
  std::vector<T> a_log(static_cast<std::size_t>(inner * state));
  for (Index d = 0; d < inner; ++d)
    for (Index n = 0; n < state; ++n) a_log[d * state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
  store.add(prefix + ".A_log", {inner, state}, std::move(a_log));
  store.add(prefix + ".D", {inner}, std::vector<T>(static_cast<std::size_t>(inner), T(1)));
  add_linear(store, prefix + ".x_proj", rank + 2 * state, inner, rng, false);
  const double dt_std = 1.0 / std::sqrt(static_cast<double>(rank));
  store.add(prefix + ".dt_proj.weight", {inner, rank}, rng.uniform_vector<T>(inner * rank, -dt_std, dt_std));
  // Bias = softplus^-1(dt) with dt log-uniform in [1e-3, 1e-1].
  std::vector<T> dt_bias(static_cast<std::size_t>(inner));
  for (auto& v : dt_bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  store.add(prefix + ".dt_proj.bias", {inner}, std::move(dt_bias));
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& feature, ScanDirection dir) {
  if (feature.rank() != 4) throw ConfigError("flatten expects [B,C,H,W], got " + to_string(feature.shape()));
  const Index B = feature.dim(0), C = feature.dim(1), H = feature.dim(2), W = feature.dim(3), L = H * W;
  const auto order = traversal(dir, H, W);
  std::vector<Index> index(static_cast<std::size_t>(B * L * C));
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < L; ++t)
      for (Index c = 0; c < C; ++c) index[(b * L + t) * C + c] = (b * C + c) * L + order[t];
  return gather(feature, {B, L, C}, std::move(index), "flatten");
}

template <typename T>
Tensor<T> unflatten(const Tensor<T>& seq, ScanDirection dir, Index height, Index width) {
  if (seq.rank() != 3 || seq.dim(1) != height * width) {
    throw ConfigError("unflatten of " + to_string(seq.shape()) + " to a " + std::to_string(height) + "x" +
                      std::to_string(width) + " grid");
  }
  const Index B = seq.dim(0), L = seq.dim(1), C = seq.dim(2);
  const auto order = traversal(dir, height, width);
  std::vector<Index> index(static_cast<std::size_t>(B * L * C));
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < L; ++t)
      for (Index c = 0; c < C; ++c) index[(b * C + c) * L + order[t]] = (b * L + t) * C + c;
  return gather(seq, {B, C, height, width}, std::move(index), "unflatten");
}

template <typename T>
Tensor<T> scan_recurrence(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a_log,
                          const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip) {
  if (u.rank() != 3 || delta.shape() != u.shape() || a_log.rank() != 2 || a_log.dim(0) != u.dim(2) ||
      b.rank() != 3 || b.dim(0) != u.dim(0) || b.dim(1) != u.dim(1) || b.dim(2) != a_log.dim(1) ||
      c.shape() != b.shape() || d_skip.size() != u.dim(2)) {
    throw ConfigError("scan shapes inconsistent: u " + to_string(u.shape()) + ", delta " +
                      to_string(delta.shape()) + ", A " + to_string(a_log.shape()) + ", B " +
                      to_string(b.shape()) + ", C " + to_string(c.shape()) + ", D " + to_string(d_skip.shape()));
  }
  const kernels::ScanGeometry g{u.dim(0), u.dim(1), u.dim(2), a_log.dim(1)};
  const kernels::ScanInputs<T> in{u.data(), delta.data(), a_log.data(), b.data(), c.data(), d_skip.data()};
  std::vector<T> y(static_cast<std::size_t>(u.size()));
  const bool recording = grad_enabled() &&
                         (u.requires_grad() || delta.requires_grad() || a_log.requires_grad() ||
                          b.requires_grad() || c.requires_grad() || d_skip.requires_grad());
  auto states = std::make_shared<std::vector<T>>(recording ? static_cast<std::size_t>(g.batch * g.channels * g.length * g.state) : 0);
  const Index bad = kernels::parallel::selective_scan_forward<T>(g, in, y, *states);
  if (bad >= 0) throw NumericError("selective scan produced a non-finite value at step " + std::to_string(bad));
  return make_result<T>(u.shape(), std::move(y), "selective_scan", {u, delta, a_log, b, c, d_skip},
                        [g, states](Node<T>& self) {
    auto& ins = self.inputs;
    const kernels::ScanInputs<T> in{ins[0]->value, ins[1]->value, ins[2]->value,
                                    ins[3]->value, ins[4]->value, ins[5]->value};
    auto buf = [&](std::size_t i) -> std::span<T> {
      return ins[i]->requires_grad ? std::span<T>(ins[i]->grad_buffer()) : std::span<T>{};
    };
    const kernels::ScanGrads<T> grads{buf(0), buf(1), buf(2), buf(3), buf(4), buf(5)};
    kernels::parallel::selective_scan_backward<T>(g, in, *states, self.grad, grads);
  });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& driver, const SsmParams<T>& params) {
  if (u.shape() != driver.shape() || u.rank() != 3 || u.dim(2) != params.inner()) {
    throw ConfigError("selective_scan: sequence " + to_string(u.shape()) + ", driver " +
                      to_string(driver.shape()) + ", inner width " + std::to_string(params.inner()));
  }
  const Index R = params.rank(), N = params.state();
  const auto proj = linear(driver, params.x_proj, Tensor<T>{});
  const auto seed = slice_last(proj, 0, R);
  const auto bmat = slice_last(proj, R, N);
  const auto cmat = slice_last(proj, R + N, N);
  const auto delta = softplus(linear(seed, params.dt_proj_weight, params.dt_proj_bias));
  return scan_recurrence(u, delta, params.a_log, bmat, cmat, params.d_skip);
}

template <typename T>
Tensor<T> four_way_scan(const Tensor<T>& feature, const Tensor<T>& driver,
                        const std::array<SsmParams<T>, 4>& params) {
  if (feature.rank() != 4 || feature.shape() != driver.shape()) {
    throw ConfigError("four_way_scan: feature " + to_string(feature.shape()) + ", driver " +
                      to_string(driver.shape()));
  }
  const Index H = feature.dim(2), W = feature.dim(3);
  std::array<Tensor<T>, 4> outs;
  for (std::size_t k = 0; k < kDirections.size(); ++k) {
    const auto dir = kDirections[k];
    const auto u = flatten(feature, dir);
    const auto drv = driver.node() == feature.node() ? u : flatten(driver, dir);
    outs[k] = unflatten(selective_scan(u, drv, params[k]), dir, H, W);
  }
  return add(add(outs[0], outs[1]), add(outs[2], outs[3]));
}

template <typename T>
MambaParams<T> MambaParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  MambaParams p;
  p.norm_weight = store.at(prefix + ".norm.weight");
  p.norm_bias = store.at(prefix + ".norm.bias");
  p.in_proj_weight = store.at(prefix + ".in_proj.weight");
  p.in_proj_bias = store.at(prefix + ".in_proj.bias");
  p.gate_weight = store.at(prefix + ".gate.weight");
  p.gate_bias = store.at(prefix + ".gate.bias");
  p.conv_weight = store.at(prefix + ".dwconv.weight");
  p.conv_bias = store.at(prefix + ".dwconv.bias");
  for (std::size_t k = 0; k < kDirections.size(); ++k) {
    p.scans[k] = SsmParams<T>::from(store, prefix + ".scan." + std::string(name(kDirections[k])));
  }
  p.out_proj_weight = store.at(prefix + ".out_proj.weight");
  p.out_proj_bias = store.at(prefix + ".out_proj.bias");
  return p;
}

template <typename T>
void MambaParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                         const SsmConfig& cfg, CounterRng& rng) {
  const Index inner = cfg.expand * channels;
  add_norm(store, prefix + ".norm", channels);
  add_conv(store, prefix + ".in_proj", inner, channels, 1, rng);
  add_conv(store, prefix + ".gate", inner, channels, 1, rng);
  add_depthwise(store, prefix + ".dwconv", inner, cfg.conv_kernel, rng);
  for (auto dir : kDirections) {
    SsmParams<T>::add(store, prefix + ".scan." + std::string(name(dir)), inner, cfg.state,
                      cfg.rank_for(inner), rng);
  }
  add_conv(store, prefix + ".out_proj", channels, inner, 1, rng);
}

template <typename T>
FusionMambaParams<T> FusionMambaParams<T>::from(const ParameterStore<T>& store, const std::string& prefix) {
  FusionMambaParams p;
  p.main = MambaParams<T>::from(store, prefix);
  p.aux_norm_weight = store.at(prefix + ".aux_norm.weight");
  p.aux_norm_bias = store.at(prefix + ".aux_norm.bias");
  p.aux_in_proj_weight = store.at(prefix + ".aux_in_proj.weight");
  p.aux_in_proj_bias = store.at(prefix + ".aux_in_proj.bias");
  p.aux_conv_weight = store.at(prefix + ".aux_dwconv.weight");
  p.aux_conv_bias = store.at(prefix + ".aux_dwconv.bias");
  return p;
}

template <typename T>
void FusionMambaParams<T>::add(ParameterStore<T>& store, const std::string& prefix, Index channels,
                               const SsmConfig& cfg, CounterRng& rng) {
  MambaParams<T>::add(store, prefix, channels, cfg, rng);
  const Index inner = cfg.expand * channels;
  add_norm(store, prefix + ".aux_norm", channels);
  add_conv(store, prefix + ".aux_in_proj", inner, channels, 1, rng);
  add_depthwise(store, prefix + ".aux_dwconv", inner, cfg.conv_kernel, rng);
}

namespace {

template <typename T>
Tensor<T> inner_branch(const Tensor<T>& x, const Tensor<T>& nw, const Tensor<T>& nb, const Tensor<T>& pw,
                       const Tensor<T>& pb, const Tensor<T>& cw, const Tensor<T>& cb) {
  const auto normed = layer_norm_channels(x, nw, nb);
  const Index k = cw.dim(2);
  return silu(depthwise_conv2d(pointwise_conv(normed, pw, pb), cw, cb, (k - 1) / 2));
}

template <typename T>
void check_channels(const Tensor<T>& x, const MambaParams<T>& p, const char* what) {
  if (x.rank() != 4 || x.dim(1) != p.norm_weight.size()) {
    throw ConfigError(std::string(what) + ": input " + to_string(x.shape()) + " does not match block width " +
                      std::to_string(p.norm_weight.size()));
  }
}

template <typename T>
Tensor<T> finish(const Tensor<T>& residual, const Tensor<T>& scanned, const Tensor<T>& normed,
                 const MambaParams<T>& p) {
  const auto gate = silu(pointwise_conv(normed, p.gate_weight, p.gate_bias));
  return add(residual, pointwise_conv(mul(scanned, gate), p.out_proj_weight, p.out_proj_bias));
}

}  // namespace

template <typename T>
Tensor<T> mamba_block(const Tensor<T>& input, const MambaParams<T>& p) {
  check_channels(input, p, "mamba_block");
  const auto normed = layer_norm_channels(input, p.norm_weight, p.norm_bias);
  const Index k = p.conv_weight.dim(2);
  const auto xc = silu(depthwise_conv2d(pointwise_conv(normed, p.in_proj_weight, p.in_proj_bias),
                                        p.conv_weight, p.conv_bias, (k - 1) / 2));
  return finish(input, four_way_scan(xc, p.scans), normed, p);
}

template <typename T>
Tensor<T> fusion_mamba_block(const Tensor<T>& primary, const Tensor<T>& auxiliary,
                             const FusionMambaParams<T>& params) {
  const auto& p = params.main;
  check_channels(primary, p, "fusion_mamba_block");
  if (auxiliary.shape() != primary.shape()) {
    throw ConfigError("fusion_mamba_block: primary " + to_string(primary.shape()) + ", auxiliary " +
                      to_string(auxiliary.shape()));
  }
  const auto normed = layer_norm_channels(primary, p.norm_weight, p.norm_bias);
  const Index k = p.conv_weight.dim(2);
  const auto xp = silu(depthwise_conv2d(pointwise_conv(normed, p.in_proj_weight, p.in_proj_bias),
                                        p.conv_weight, p.conv_bias, (k - 1) / 2));
  const auto xa = inner_branch(auxiliary, params.aux_norm_weight, params.aux_norm_bias,
                               params.aux_in_proj_weight, params.aux_in_proj_bias,
                               params.aux_conv_weight, params.aux_conv_bias);
  return finish(primary, four_way_scan(xp, xa, p.scans), normed, p);
}

#define UAVD_INSTANTIATE(T)                                                                       \
  template struct SsmParams<T>;                                                                   \
  template struct MambaParams<T>;                                                                 \
  template struct FusionMambaParams<T>;                                                           \
  template Tensor<T> flatten<T>(const Tensor<T>&, ScanDirection);                                 \
  template Tensor<T> unflatten<T>(const Tensor<T>&, ScanDirection, Index, Index);                 \
  template Tensor<T> scan_recurrence<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                        const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const Tensor<T>&, const SsmParams<T>&);  \
  template Tensor<T> four_way_scan<T>(const Tensor<T>&, const Tensor<T>&,                         \
                                      const std::array<SsmParams<T>, 4>&);                        \
  template Tensor<T> mamba_block<T>(const Tensor<T>&, const MambaParams<T>&);                     \
  template Tensor<T> fusion_mamba_block<T>(const Tensor<T>&, const Tensor<T>&, const FusionMambaParams<T>&);

UAVD_INSTANTIATE(float)
UAVD_INSTANTIATE(double)
#undef UAVD_INSTANTIATE

}  // namespace uavd::ssm

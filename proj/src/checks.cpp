#include "uavd/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "uavd/attention.hpp"
#include "uavd/detect.hpp"
#include "uavd/gradcheck.hpp"
#include "uavd/init.hpp"
#include "uavd/ssm.hpp"

namespace uavd::checks {

namespace {

using D = Tensor<double>;

constexpr double kStep = 1e-3;
constexpr double kGradTol = 1e-5;

D random_leaf(CounterRng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  return D::leaf(shape, rng.uniform_vector<double>(numel(shape), lo, hi));
}

/// Values spaced `gap` apart in shuffled order, so max-style ops have no
/// near-ties within a finite-difference step.
D distinct_leaf(CounterRng& rng, const Shape& shape, double gap = 0.01) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  std::iota(v.begin(), v.end(), 0.0);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(i)))]);
  for (auto& x : v) x = (x - static_cast<double>(v.size()) / 2) * gap;
  return D::leaf(shape, std::move(v));
}

std::vector<D> store_leaves(const ParameterStore<double>& store) {
  std::vector<D> out;
  for (const auto& [name, t] : store.entries()) out.push_back(t);
  return out;
}

/// Redraws every parameter from U(-0.5, 0.5): gradient checks treat
/// parameters as small random inputs rather than sitting at initialization.
void randomize(ParameterStore<double>& store, CounterRng& rng) {
  for (const auto& [name, t] : store.entries()) {
    Tensor<double> leaf = t;
    for (auto& v : leaf.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
}

std::string fmt(const char* pattern, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

using GradFn = double (*)(const Hooks&, double);

/// Checks at the pinned step; a failure also reports the error at a third of
/// the step, whose ratio to the first tells truncation (about 9) from a wrong
/// gradient (about 1).
std::function<Result(const Hooks&)> grad_property(const std::string& name, GradFn fn) {
  return [name, fn](const Hooks& hooks) {
    const double err = fn(hooks, kStep);
    Result r{name, err < kGradTol, fmt("max rel err %.3e at h=1e-3", err)};
    if (!r.passed) {
      const double finer = fn(hooks, kStep / 3);
      r.detail += fmt("; %.3e at h=1e-3/3", finer) + fmt(" (ratio %.1f)", err / std::max(finer, 1e-300));
    }
    return r;
  };
}

double grad_pointwise(const Hooks&, double h) {
  CounterRng rng(101);
  double worst = 0;
  for (auto op : {PointwiseOp::add, PointwiseOp::sub, PointwiseOp::mul, PointwiseOp::safe_div}) {
    std::vector<D> in{random_leaf(rng, {2, 3, 4}), random_leaf(rng, {1, 3, 1}, 0.5, 1.5)};
    worst = std::max(worst, grad_check<double>([op](const auto& x) { return sum_all(pointwise(op, x[0], x[1])); },
                                               in, h));
  }
  for (auto op : {PointwiseOp::sigmoid, PointwiseOp::silu, PointwiseOp::exp, PointwiseOp::softplus}) {
    std::vector<D> in{random_leaf(rng, {2, 3, 4}, -2, 2)};
    worst = std::max(worst, grad_check<double>([op](const auto& x) { return sum_all(pointwise(op, x[0])); },
                                               in, h));
  }
  std::vector<D> in{random_leaf(rng, {3, 4})};
  worst = std::max(worst, grad_check<double>([](const auto& x) { return sum_all(scale(x[0], 1.7)); }, in, h));
  return worst;
}

double grad_conv(const Hooks&, double h) {
  CounterRng rng(102);
  std::vector<D> in{random_leaf(rng, {2, 3, 6, 5}), random_leaf(rng, {4, 3, 3, 3}), random_leaf(rng, {4})};
  double worst = grad_check<double>([](const auto& x) { return sum_all(conv2d(x[0], x[1], x[2], 2, 1)); }, in, h);
  std::vector<D> dw{random_leaf(rng, {1, 3, 5, 5}), random_leaf(rng, {3, 1, 3, 3}), random_leaf(rng, {3})};
  worst = std::max(worst, grad_check<double>(
                              [](const auto& x) { return sum_all(depthwise_conv2d(x[0], x[1], x[2], 1)); }, dw, h));
  return worst;
}

double grad_pool_reduce(const Hooks&, double h) {
  CounterRng rng(103);
  std::vector<D> in{distinct_leaf(rng, {1, 2, 5, 5})};
  double worst = grad_check<double>([](const auto& x) { return sum_all(max_pool2d(x[0], 3, 2, 1)); }, in, h);
  for (auto op : {ReduceOp::max_channel, ReduceOp::mean_channel, ReduceOp::global_avg_pool,
                  ReduceOp::global_max_pool, ReduceOp::mean_all}) {
    std::vector<D> r{distinct_leaf(rng, {2, 3, 3, 3})};
    worst = std::max(worst, grad_check<double>(
                                [op](const auto& x) { return sum_all(mul(reduce(op, x[0]), reduce(op, x[0]))); }, r,
                                h));
  }
  return worst;
}

double grad_linear_norm(const Hooks&, double h) {
  CounterRng rng(104);
  std::vector<D> lin{random_leaf(rng, {2, 3, 5}), random_leaf(rng, {4, 5}), random_leaf(rng, {4})};
  double worst = grad_check<double>([](const auto& x) { return sum_all(linear(x[0], x[1], x[2])); }, lin, h);
  std::vector<D> ln{random_leaf(rng, {2, 8, 3, 3}), random_leaf(rng, {8}, 0.5, 1.5), random_leaf(rng, {8})};
  worst = std::max(worst, grad_check<double>(
                              [](const auto& x) { return sum_all(layer_norm_channels(x[0], x[1], x[2])); }, ln, h));
  return worst;
}

double grad_shape_ops(const Hooks&, double h) {
  CounterRng rng(105);
  std::vector<D> in{random_leaf(rng, {1, 2, 3, 3}), random_leaf(rng, {1, 1, 3, 3}), random_leaf(rng, {1, 3, 6, 6})};
  const double worst = grad_check<double>(
      [](const auto& x) {
        const auto up = upsample_nearest2x(concat_channels<double>({x[0], x[1]}));
        const auto flat = reshape(mul(up, x[2]), {1, 3, 36});
        return sum_all(mul(slice_last(flat, 5, 20), slice_last(flat, 10, 20)));
      },
      in, h);
  return worst;
}

/// Offsets at least 0.2 px away from integers, so every finite-difference
/// step stays inside one bilinear cell.
D fractional_offsets(CounterRng& rng, const Shape& shape) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<double>(rng.below(3) - 1) + rng.uniform(0.2, 0.8);
  return D::leaf(shape, std::move(v));
}

double grad_deformable(const Hooks& hooks, double h) {
  CounterRng rng(106);
  std::vector<D> in{random_leaf(rng, {1, 2, 6, 6}), random_leaf(rng, {3, 2, 3, 3}), random_leaf(rng, {3}),
                    fractional_offsets(rng, {1, 18, 3, 3})};
  const auto deform = hooks.deform;
  const double worst = grad_check<double>(
      [&](const auto& x) { return sum_all(deform(x[0], x[1], x[2], {x[3]}, 2, 1)); }, in, h);
  return worst;
}

double grad_attention(const Hooks&, double h) {
  CounterRng rng(107);
  ParameterStore<double> store;
  attention::SpatialParams<double>::add(store, "s.rgb", 3, rng);
  attention::SpatialParams<double>::add(store, "s.ir", 3, rng);
  attention::ChannelMlpParams<double>::add(store, "c.rgb", 4, 2, rng);
  attention::ChannelMlpParams<double>::add(store, "c.ir", 4, 2, rng);
  randomize(store, rng);
  auto leaves = store_leaves(store);
  leaves.push_back(distinct_leaf(rng, {1, 4, 4, 4}, 0.02));
  leaves.push_back(distinct_leaf(rng, {1, 4, 4, 4}, 0.02));
  const D rgb = leaves[leaves.size() - 2], ir = leaves.back();
  const double worst = grad_check<double>(
      [&](const auto&) {
        using namespace attention;
        const auto [a, b] = cross_enhanced_spatial(rgb, ir, SpatialParams<double>::from(store, "s.rgb"),
                                                   SpatialParams<double>::from(store, "s.ir"));
        const auto wa = channel_attention(a, ChannelMlpParams<double>::from(store, "c.rgb"), 2);
        const auto wb = channel_attention(b, ChannelMlpParams<double>::from(store, "c.ir"), 2);
        return sum_all(cross_channel_fuse(a, b, wa, wb));
      },
      leaves, h);
  return worst;
}

ssm::SsmConfig small_ssm() { return {2, 3, 3, 0}; }

double grad_scan(const Hooks&, double h) {
  CounterRng rng(108);
  ParameterStore<double> store;
  ssm::SsmParams<double>::add(store, "scan", 3, 4, 2, rng);
  randomize(store, rng);
  auto leaves = store_leaves(store);
  leaves.push_back(random_leaf(rng, {2, 6, 3}));
  leaves.push_back(random_leaf(rng, {2, 6, 3}));
  const D u = leaves[leaves.size() - 2], driver = leaves.back();
  const auto p = ssm::SsmParams<double>::from(store, "scan");
  const double worst =
      grad_check<double>([&](const auto&) { return sum_all(ssm::selective_scan(u, driver, p)); }, leaves, h);
  return worst;
}

double grad_four_way(const Hooks&, double h) {
  CounterRng rng(109);
  ParameterStore<double> store;
  std::array<ssm::SsmParams<double>, 4> p;
  for (std::size_t k = 0; k < 4; ++k) {
    ssm::SsmParams<double>::add(store, "s" + std::to_string(k), 2, 3, 1, rng);
    p[k] = ssm::SsmParams<double>::from(store, "s" + std::to_string(k));
  }
  randomize(store, rng);
  auto leaves = store_leaves(store);
  leaves.push_back(random_leaf(rng, {1, 2, 3, 4}));
  const D x = leaves.back();
  const double worst = grad_check<double>([&](const auto&) { return sum_all(ssm::four_way_scan(x, p)); }, leaves, h);
  return worst;
}

double grad_mamba(const Hooks&, double h) {
  CounterRng rng(110);
  ParameterStore<double> store;
  ssm::MambaParams<double>::add(store, "m", 4, small_ssm(), rng);
  ssm::FusionMambaParams<double>::add(store, "f", 4, small_ssm(), rng);
  randomize(store, rng);
  auto leaves = store_leaves(store);
  leaves.push_back(random_leaf(rng, {1, 4, 3, 3}));
  leaves.push_back(random_leaf(rng, {1, 4, 3, 3}));
  const D a = leaves[leaves.size() - 2], b = leaves.back();
  const auto mp = ssm::MambaParams<double>::from(store, "m");
  const auto fp = ssm::FusionMambaParams<double>::from(store, "f");
  double worst = grad_check<double>([&](const auto&) { return sum_all(ssm::mamba_block(a, mp)); }, leaves, h);
  worst = std::max(worst, grad_check<double>(
                              [&](const auto&) { return sum_all(ssm::fusion_mamba_block(a, b, fp)); }, leaves, h));
  return worst;
}

double grad_loss(const Hooks&, double h) {
  CounterRng rng(111);
  const Index nc = 2, reg = 3;
  detect::RawPredictions<double> preds;
  std::vector<D> leaves;
  const Index sizes[3] = {4, 2, 1};
  for (int l = 0; l < detect::kNumLevels; ++l) {
    preds.levels[l].cls = random_leaf(rng, {1, nc, sizes[l], sizes[l]}, -2, 2);
    preds.levels[l].box = random_leaf(rng, {1, 4 * (reg + 1), sizes[l], sizes[l]}, -2, 2);
    preds.levels[l].stride = detect::kLevelStrides[l];
    leaves.push_back(preds.levels[l].cls);
    leaves.push_back(preds.levels[l].box);
  }
  const std::vector<std::vector<detect::DetectionBox>> gts{
      {{0.30, 0.35, 0.3, 0.25, 0, 1}, {0.6, 0.55, 0.5, 0.6, 1, 1}, {0.8, 0.2, 0.06, 0.08, 1, 1}}};
  const std::vector<detect::Assignment> as{detect::assign_targets(gts[0], detect::grids_of(preds))};
  const double worst = grad_check<double>(
      [&](const auto&) { return detect::total_loss(preds, as, gts, detect::LossWeights{}).total; }, leaves, h);
  return worst;
}

/// Independent double-precision recurrence over the float projections.
std::vector<double> scan_oracle(const Tensor<float>& u, const ssm::SsmParams<float>& p) {
  const Index B = u.dim(0), L = u.dim(1), Dm = u.dim(2), N = p.state(), R = p.rank();
  const auto uv = u.data(), xp = p.x_proj.data(), dw = p.dt_proj_weight.data(), db = p.dt_proj_bias.data(),
             al = p.a_log.data(), ds = p.d_skip.data();
  std::vector<double> y(static_cast<std::size_t>(B * L * Dm));
  for (Index b = 0; b < B; ++b) {
    std::vector<double> h(static_cast<std::size_t>(Dm * N), 0.0);
    for (Index t = 0; t < L; ++t) {
      const float* x = uv.data() + (b * L + t) * Dm;
      std::vector<double> proj(static_cast<std::size_t>(R + 2 * N), 0.0);
      for (Index r = 0; r < R + 2 * N; ++r) {
        for (Index d = 0; d < Dm; ++d) proj[r] += double(xp[r * Dm + d]) * x[d];
      }
      for (Index d = 0; d < Dm; ++d) {
        double pre = db[d];
        for (Index r = 0; r < R; ++r) pre += double(dw[d * R + r]) * proj[r];
        const double delta = pre > 20 ? pre : std::log1p(std::exp(pre));
        double out = double(ds[d]) * x[d];
        for (Index n = 0; n < N; ++n) {
          const double a = -std::exp(double(al[d * N + n]));
          double& s = h[static_cast<std::size_t>(d * N + n)];
          s = std::exp(delta * a) * s + delta * proj[R + n] * x[d];
          out += proj[R + N + n] * s;
        }
        y[static_cast<std::size_t>((b * L + t) * Dm + d)] = out;
      }
    }
  }
  return y;
}

Result scan_oracle_check(const Hooks&) {
  double worst = 0;
  for (Index L : {1, 7, 32, 256}) {
    CounterRng rng(200 + static_cast<std::uint64_t>(L));
    ParameterStore<float> store;
    ssm::SsmParams<float>::add(store, "scan", 4, 8, 1, rng);
    const auto p = ssm::SsmParams<float>::from(store, "scan");
    const auto u = Tensor<float>::from({2, L, 4}, rng.uniform_vector<float>(2 * L * 4, -1, 1));
    NoGradGuard guard;
    const auto out = ssm::selective_scan(u, p);
    const auto y = out.data();
    const auto ref = scan_oracle(u, p);
    double diff = 0, scale_ref = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      diff = std::max(diff, std::abs(double(y[i]) - ref[i]));
      scale_ref = std::max(scale_ref, std::abs(ref[i]));
    }
    worst = std::max(worst, diff / std::max(scale_ref, 1e-30));
  }
  return {"scan.oracle", worst < 1e-5, fmt("L in {1,7,32,256}, max rel err %.3e", worst)};
}

Result zero_offset(const Hooks& hooks) {
  CounterRng rng(300);
  double worst = 0;
  NoGradGuard guard;
  for (int i = 0; i < 20; ++i) {
    const Index k = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(k);
    const Index b = 1 + rng.below(2), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const Index h = k + rng.below(5), w = k + rng.below(5);
    const auto x = random_leaf(rng, {b, cin, h, w});
    const auto wt = random_leaf(rng, {cout, cin, k, k});
    const auto bias = random_leaf(rng, {cout});
    const auto ref = conv2d(x, wt, bias, stride, pad);
    const auto zero = D::zeros({b, 2 * k * k, ref.dim(2), ref.dim(3)});
    const auto got = hooks.deform(x, wt, bias, {zero}, stride, pad);
    for (Index j = 0; j < ref.size(); ++j) worst = std::max(worst, std::abs(ref.data()[j] - got.data()[j]));
  }
  return {"deform.zero_offset", worst < 1e-5, fmt("20 configs, max abs diff %.3e", worst)};
}

Result shift_oracle(const Hooks& hooks) {
  CounterRng rng(301);
  NoGradGuard guard;
  const Index dy = 1, dx = -2, k = 3, H = 7, W = 8;
  const auto x = random_leaf(rng, {1, 2, H, W});
  const auto wt = random_leaf(rng, {2, 2, k, k});
  const auto bias = random_leaf(rng, {2});
  std::vector<double> shifted(static_cast<std::size_t>(x.size()), 0.0);
  for (Index c = 0; c < 2; ++c) {
    for (Index y = 0; y < H; ++y) {
      for (Index xx = 0; xx < W; ++xx) {
        const Index sy = y + dy, sx = xx + dx;
        if (sy >= 0 && sy < H && sx >= 0 && sx < W) shifted[(c * H + y) * W + xx] = x.data()[(c * H + sy) * W + sx];
      }
    }
  }
  const auto ref = conv2d(D::from(x.shape(), shifted), wt, bias, 1, 0);
  std::vector<double> off(static_cast<std::size_t>(2 * k * k * ref.dim(2) * ref.dim(3)));
  const Index plane = ref.dim(2) * ref.dim(3);
  for (Index t = 0; t < k * k; ++t) {
    std::fill_n(off.begin() + (2 * t) * plane, plane, double(dy));
    std::fill_n(off.begin() + (2 * t + 1) * plane, plane, double(dx));
  }
  const auto got = hooks.deform(x, wt, bias, {D::from({1, 2 * k * k, ref.dim(2), ref.dim(3)}, off)}, 1, 0);
  double worst = 0;
  for (Index j = 0; j < ref.size(); ++j) worst = std::max(worst, std::abs(ref.data()[j] - got.data()[j]));
  return {"deform.shift_oracle", worst < 1e-9, fmt("offset (dy=1, dx=-2) vs shifted conv, max abs diff %.3e", worst)};
}

Result fuse_symmetry(const Hooks&) {
  CounterRng rng(400);
  NoGradGuard guard;
  const auto a = random_leaf(rng, {2, 3, 4, 4}), b = random_leaf(rng, {2, 3, 4, 4});
  const attention::ChannelWeights<double> wa{random_leaf(rng, {2, 3, 1, 1}, 0.05, 0.95)};
  const attention::ChannelWeights<double> wb{random_leaf(rng, {2, 3, 1, 1}, 0.05, 0.95)};
  const auto ab = attention::cross_channel_fuse(a, b, wa, wb);
  const auto ba = attention::cross_channel_fuse(b, a, wb, wa);
  const bool same = std::equal(ab.data().begin(), ab.data().end(), ba.data().begin());
  const double hand = attention::cross_channel_fuse<double>(
                          D::from({1, 1, 1, 1}, {2.0}), D::from({1, 1, 1, 1}, {3.0}),
                          {D::from({1, 1, 1, 1}, {0.5})}, {D::from({1, 1, 1, 1}, {0.25})}, 0.0)
                          .item();
  return {"fuse.symmetry", same && hand == 5.5,
          std::string(same ? "swap-invariant" : "swap changes output") + fmt(", hand case %.6g", hand)};
}

void zero_tensor(ParameterStore<double>& store, const std::string& name) {
  auto d = store.at(name).mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

Result residual_identities(const Hooks&) {
  CounterRng rng(500);
  ParameterStore<double> store;
  ssm::MambaParams<double>::add(store, "m", 4, small_ssm(), rng);
  ssm::FusionMambaParams<double>::add(store, "f", 4, small_ssm(), rng);
  detect::add_sppf_params(store, "sppf", 8, small_ssm(), rng);
  for (const char* p : {"m", "f", "sppf.mamba1", "sppf.mamba2", "sppf.mamba3"}) {
    zero_tensor(store, std::string(p) + ".out_proj.weight");
    zero_tensor(store, std::string(p) + ".out_proj.bias");
  }
  NoGradGuard guard;
  const auto x = random_leaf(rng, {1, 4, 5, 6}), aux = random_leaf(rng, {1, 4, 5, 6});
  const auto m = ssm::mamba_block(x, ssm::MambaParams<double>::from(store, "m"));
  const auto f = ssm::fusion_mamba_block(x, aux, ssm::FusionMambaParams<double>::from(store, "f"));
  const bool mamba_ok = std::equal(x.data().begin(), x.data().end(), m.data().begin());
  const bool fusion_ok = std::equal(x.data().begin(), x.data().end(), f.data().begin());

  // Plain SPPF: cv1, three cascaded pools concatenated unchanged, cv2.
  const auto y = random_leaf(rng, {1, 8, 4, 4});
  const auto conv_silu = [&](const D& in, const std::string& p) {
    return silu(conv2d(in, store.at(p + ".weight"), store.at(p + ".bias"), 1, 0));
  };
  const auto x1 = conv_silu(y, "sppf.cv1");
  const auto p1 = max_pool2d(x1, 5, 1, 2), p2 = max_pool2d(p1, 5, 1, 2), p3 = max_pool2d(p2, 5, 1, 2);
  const auto plain = conv_silu(concat_channels<double>({x1, p1, p2, p3}), "sppf.cv2");
  const auto got = detect::sppf_m(y, store, "sppf");
  const bool sppf_ok = std::equal(plain.data().begin(), plain.data().end(), got.data().begin());
  std::string detail = std::string("mamba ") + (mamba_ok ? "exact" : "differs") + ", fusion " +
                       (fusion_ok ? "exact" : "differs") + ", sppf_m " + (sppf_ok ? "exact" : "differs");
  return {"residual.identities", mamba_ok && fusion_ok && sppf_ok, detail};
}

Result direction_inverse(const Hooks&) {
  CounterRng rng(600);
  NoGradGuard guard;
  const auto x = random_leaf(rng, {2, 3, 4, 5});
  bool ok = true;
  for (auto dir : ssm::kDirections) {
    const auto back = ssm::unflatten(ssm::flatten(x, dir), dir, 4, 5);
    ok = ok && std::equal(x.data().begin(), x.data().end(), back.data().begin());
  }
  return {"ssm.direction_inverse", ok, ok ? "all four traversals bitwise" : "a traversal does not invert"};
}

}  // namespace

std::string Result::line() const { return std::string(passed ? "PASS " : "FAIL ") + name + ": " + detail; }

bool Report::all_passed() const {
  return std::all_of(results.begin(), results.end(), [](const Result& r) { return r.passed; });
}

const Result* Report::find(const std::string& name) const {
  for (const auto& r : results) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const std::vector<Property>& registry() {
  static const std::vector<Property> props{
      {"grad.pointwise", grad_property("grad.pointwise", grad_pointwise)},
      {"grad.conv2d", grad_property("grad.conv2d", grad_conv)},
      {"grad.pool_reduce", grad_property("grad.pool_reduce", grad_pool_reduce)},
      {"grad.linear_layer_norm", grad_property("grad.linear_layer_norm", grad_linear_norm)},
      {"grad.shape_ops", grad_property("grad.shape_ops", grad_shape_ops)},
      {"grad.deformable_conv2d", grad_property("grad.deformable_conv2d", grad_deformable)},
      {"grad.attention", grad_property("grad.attention", grad_attention)},
      {"grad.selective_scan", grad_property("grad.selective_scan", grad_scan)},
      {"grad.four_way_scan", grad_property("grad.four_way_scan", grad_four_way)},
      {"grad.mamba_blocks", grad_property("grad.mamba_blocks", grad_mamba)},
      {"grad.detection_loss", grad_property("grad.detection_loss", grad_loss)},
      {"scan.oracle", scan_oracle_check},
      {"deform.zero_offset", zero_offset},
      {"deform.shift_oracle", shift_oracle},
      {"fuse.symmetry", fuse_symmetry},
      {"residual.identities", residual_identities},
      {"ssm.direction_inverse", direction_inverse},
  };
  return props;
}

Report run_checks(const Hooks& hooks, std::ostream* out) {
  Report report;
  for (const auto& p : registry()) {
    Result r;
    try {
      r = p.run(hooks);
    } catch (const std::exception& e) {
      r = {p.name, false, std::string("threw: ") + e.what()};
    }
    r.name = p.name;
    if (out) *out << r.line() << '\n' << std::flush;
    report.results.push_back(std::move(r));
  }
  return report;
}

}  // namespace uavd::checks

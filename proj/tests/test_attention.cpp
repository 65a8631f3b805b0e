#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "uavd/attention.hpp"
#include "uavd/gradcheck.hpp"

using namespace uavd;
using namespace uavd::attention;
using D = Tensor<double>;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> vec(const D& t) { return {t.data().begin(), t.data().end()}; }

double max_diff(std::span<const double> a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

SpatialParams<double> spatial(CounterRng& rng, Index k = 7) {
  ParameterStore<double> store;
  SpatialParams<double>::add(store, "s", k, rng);
  return SpatialParams<double>::from(store, "s");
}

/// sigma(conv(concat(max_c, mean_c))) from plain loops.
std::vector<double> spatial_oracle(const std::vector<double>& x, Index B, Index C, Index H, Index W,
                                   const SpatialParams<double>& p) {
  std::vector<double> planes(static_cast<std::size_t>(B * 2 * H * W));
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < H * W; ++i) {
      double mx = -INFINITY, sum = 0;
      for (Index c = 0; c < C; ++c) {
        const double v = x[(b * C + c) * H * W + i];
        mx = std::max(mx, v);
        sum += v;
      }
      planes[(b * 2) * H * W + i] = mx;
      planes[(b * 2 + 1) * H * W + i] = sum / double(C);
    }
  const Index k = p.weight.dim(2);
  auto out = oracle::conv2d(planes, B, 2, H, W, vec(p.weight), 1, k, vec(p.bias), 1, (k - 1) / 2);
  for (auto& v : out) v = sig(v);
  return out;
}

}  // namespace

TEST_CASE("spatial attention") {
  CounterRng rng(20);
  SUBCASE("zero conv gives 0.5 everywhere") {
    const SpatialParams<double> zero{D::zeros({1, 2, 7, 7}), D::zeros({1})};
    const auto m = spatial_attention(D::from({1, 3, 5, 5}, rng.uniform_vector<double>(75, -1, 1)), zero).map;
    CHECK(m.shape() == Shape{1, 1, 5, 5});
    for (double v : m.data()) CHECK(v == 0.5);
  }
  SUBCASE("matches the composed oracle") {
    const auto p = spatial(rng);
    const auto x = rng.uniform_vector<double>(2 * 3 * 8 * 8, -1, 1);
    const auto m = spatial_attention(D::from({2, 3, 8, 8}, x), p).map;
    CHECK(max_diff(m.data(), spatial_oracle(x, 2, 3, 8, 8, p)) < 1e-12);
  }
  SUBCASE("single channel sees two identical planes") {
    const auto x = rng.uniform_vector<double>(36, -1, 1);
    std::vector<double> w(2 * 9);
    for (int i = 0; i < 9; ++i) w[i] = rng.uniform(-1, 1), w[9 + i] = -w[i];
    const SpatialParams<double> anti{D::from({1, 2, 3, 3}, w), D::zeros({1})};
    const auto m = spatial_attention(D::from({1, 1, 6, 6}, x), anti).map;
    for (double v : m.data()) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("values stay in (0,1) and even kernels are rejected") {
    const auto p = spatial(rng, 3);
    const auto m = spatial_attention(D::from({1, 4, 4, 4}, rng.uniform_vector<double>(64, -3, 3)), p).map;
    for (double v : m.data()) {
      CHECK(v > 0);
      CHECK(v < 1);
    }
    const SpatialParams<double> even{D::zeros({1, 2, 4, 4}), D::zeros({1})};
    CHECK_THROWS_AS(spatial_attention(D::zeros({1, 2, 6, 6}), even), ConfigError);
  }
}

TEST_CASE("cross-enhanced spatial attention") {
  CounterRng rng(21);
  const auto rgb = rng.uniform_vector<double>(2 * 3 * 6 * 6, 0, 1), ir = rng.uniform_vector<double>(2 * 6 * 6, 0, 1);
  SUBCASE("saturated maps pass the inputs through") {
    const SpatialParams<double> sat{D::zeros({1, 2, 7, 7}), D::full({1}, 20.0)};
    const auto [r, i] = cross_enhanced_spatial(D::from({2, 3, 6, 6}, rgb), D::from({2, 1, 6, 6}, ir), sat, sat);
    CHECK(max_diff(r.data(), rgb) < 1e-4);
    CHECK(max_diff(i.data(), ir) < 1e-4);
  }
  SUBCASE("zero input stays zero") {
    const auto p = spatial(rng);
    const auto [r, i] = cross_enhanced_spatial(D::zeros({2, 3, 6, 6}), D::from({2, 1, 6, 6}, ir), p, spatial(rng));
    for (double v : r.data()) CHECK(v == 0.0);
    CHECK(i.shape() == Shape{2, 1, 6, 6});
  }
  SUBCASE("matches the materialized-map oracle") {
    const auto pr = spatial(rng), pi = spatial(rng);
    const auto [r, i] = cross_enhanced_spatial(D::from({2, 3, 6, 6}, rgb), D::from({2, 1, 6, 6}, ir), pr, pi);
    const auto ar = spatial_oracle(rgb, 2, 3, 6, 6, pr), ai = spatial_oracle(ir, 2, 1, 6, 6, pi);
    std::vector<double> er(rgb.size()), ei(ir.size());
    for (Index b = 0; b < 2; ++b)
      for (Index s = 0; s < 36; ++s) {
        const double m = ar[b * 36 + s] * ai[b * 36 + s];
        for (Index c = 0; c < 3; ++c) er[(b * 3 + c) * 36 + s] = rgb[(b * 3 + c) * 36 + s] * m;
        ei[b * 36 + s] = ir[b * 36 + s] * m;
      }
    CHECK(max_diff(r.data(), er) < 1e-12);
    CHECK(max_diff(i.data(), ei) < 1e-12);
  }
  SUBCASE("misaligned pairs are rejected") {
    const auto p = spatial(rng);
    CHECK_THROWS_AS(cross_enhanced_spatial(D::zeros({1, 3, 6, 6}), D::zeros({1, 1, 6, 5}), p, p), AlignmentError);
    CHECK_THROWS_AS(cross_enhanced_spatial(D::zeros({2, 3, 6, 6}), D::zeros({1, 1, 6, 6}), p, p), AlignmentError);
  }
}

TEST_CASE("channel attention") {
  CounterRng rng(22);
  ParameterStore<double> store;
  ChannelMlpParams<double>::add(store, "c", 8, 4, rng);
  const auto mlp = ChannelMlpParams<double>::from(store, "c");
  SUBCASE("zero MLP gives 0.5") {
    const ChannelMlpParams<double> zero{D::zeros({2, 8}), D::zeros({2}), D::zeros({8, 2}), D::zeros({8})};
    const auto w = channel_attention(D::from({1, 8, 4, 4}, rng.uniform_vector<double>(128, -1, 1)), zero, 4).weights;
    CHECK(w.shape() == Shape{1, 8, 1, 1});
    for (double v : w.data()) CHECK(v == 0.5);
  }
  SUBCASE("matches the composed oracle") {
    const auto x = rng.uniform_vector<double>(2 * 8 * 16, -1, 1);
    const auto w = channel_attention(D::from({2, 8, 4, 4}, x), mlp, 4).weights;
    const auto w1 = vec(mlp.fc1_weight), b1 = vec(mlp.fc1_bias), w2 = vec(mlp.fc2_weight), b2 = vec(mlp.fc2_bias);
    std::vector<double> expect;
    for (Index b = 0; b < 2; ++b) {
      double pooled[8], hidden[2];
      for (Index c = 0; c < 8; ++c) {
        double s = 0;
        for (Index i = 0; i < 16; ++i) s += x[(b * 8 + c) * 16 + i];
        pooled[c] = s / 16;
      }
      for (Index j = 0; j < 2; ++j) {
        double a = b1[j];
        for (Index c = 0; c < 8; ++c) a += w1[j * 8 + c] * pooled[c];
        hidden[j] = a * sig(a);
      }
      for (Index c = 0; c < 8; ++c) expect.push_back(sig(b2[c] + w2[c * 2] * hidden[0] + w2[c * 2 + 1] * hidden[1]));
    }
    CHECK(max_diff(w.data(), expect) < 1e-12);
  }
  SUBCASE("constant feature pools to the constant") {
    const auto a = channel_attention(D::full({1, 8, 3, 3}, 0.3), mlp, 4).weights;
    const auto b = channel_attention(D::full({1, 8, 5, 5}, 0.3), mlp, 4).weights;
    CHECK(max_diff(a.data(), vec(b)) < 1e-15);
  }
  SUBCASE("channels must divide by the reduction") {
    CHECK_THROWS_AS(channel_attention(D::zeros({1, 6, 2, 2}), mlp, 4), ConfigError);
  }
}

TEST_CASE("cross-channel fusion") {
  CounterRng rng(23);
  const auto fr = D::from({2, 3, 2, 2}, rng.uniform_vector<double>(24, -1, 1));
  const auto fi = D::from({2, 3, 2, 2}, rng.uniform_vector<double>(24, -1, 1));
  const ChannelWeights<double> wr{D::from({2, 3, 1, 1}, rng.uniform_vector<double>(6, 0.05, 0.95))};
  const ChannelWeights<double> wi{D::from({2, 3, 1, 1}, rng.uniform_vector<double>(6, 0.05, 0.95))};

  CHECK(cross_channel_fuse(D::full({1, 1, 1, 1}, 2), D::full({1, 1, 1, 1}, 3),
                           ChannelWeights<double>{D::full({1, 1, 1, 1}, 0.5)},
                           ChannelWeights<double>{D::full({1, 1, 1, 1}, 0.25)}, 0.0)
            .item() == 5.5);

  const auto ab = cross_channel_fuse(fr, fi, wr, wi), ba = cross_channel_fuse(fi, fr, wi, wr);
  CHECK(vec(ab) == vec(ba));

  const auto same = cross_channel_fuse(fr, fi, wr, wr, 0.0);
  std::vector<double> sum(24);
  for (int i = 0; i < 24; ++i) sum[i] = fr.data()[i] + fi.data()[i];
  CHECK(max_diff(same.data(), sum) < 1e-15);

  CHECK_THROWS_AS(cross_channel_fuse(fr, D::zeros({2, 3, 2, 3}), wr, wi), ConfigError);
  CHECK_THROWS_AS(cross_channel_fuse(fr, fi, ChannelWeights<double>{D::zeros({2, 4, 1, 1})}, wi), ConfigError);
}

TEST_CASE("gradients through every attention op") {
  CounterRng rng(24);
  std::vector<D> in{D::leaf({1, 3, 5, 5}, rng.uniform_vector<double>(75, -1, 1)),
                    D::leaf({1, 1, 5, 5}, rng.uniform_vector<double>(25, -1, 1)),
                    D::leaf({1, 2, 3, 3}, rng.uniform_vector<double>(18, -0.5, 0.5)), D::leaf({1}, {0.1}),
                    D::leaf({1, 2, 3, 3}, rng.uniform_vector<double>(18, -0.5, 0.5)), D::leaf({1}, {-0.2})};
  const auto spatial_err = grad_check<double>(
      [](const std::vector<D>& x) {
        const auto [r, i] = cross_enhanced_spatial(x[0], x[1], SpatialParams<double>{x[2], x[3]},
                                                   SpatialParams<double>{x[4], x[5]});
        return add(sum_all(mul(r, r)), sum_all(i));
      },
      in, 1e-4);
  CHECK(spatial_err < 1e-5);

  std::vector<D> ch{D::leaf({2, 4, 3, 3}, rng.uniform_vector<double>(72, -1, 1)),
                    D::leaf({2, 4, 3, 3}, rng.uniform_vector<double>(72, -1, 1)),
                    D::leaf({1, 4}, rng.uniform_vector<double>(4, -1, 1)), D::leaf({1}, {0.1}),
                    D::leaf({4, 1}, rng.uniform_vector<double>(4, -1, 1)), D::leaf({4}, rng.uniform_vector<double>(4, -1, 1))};
  const auto channel_err = grad_check<double>(
      [](const std::vector<D>& x) {
        const ChannelMlpParams<double> m{x[2], x[3], x[4], x[5]};
        const auto wa = channel_attention(x[0], m, 4), wb = channel_attention(x[1], m, 4);
        return sum_all(mul(cross_channel_fuse(x[0], x[1], wa, wb), x[0]));
      },
      ch, 1e-4);
  CHECK(channel_err < 1e-5);
}

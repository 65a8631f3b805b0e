#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "uavd/bilinear.hpp"
#include "uavd/gradcheck.hpp"
#include "uavd/ops.hpp"

using namespace uavd;
using F = Tensor<float>;
using D = Tensor<double>;

namespace {

template <typename T>
double max_abs_diff(std::span<const T> a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("conv2d of ones sums the window") {
  const auto out = conv2d(F::full({1, 1, 3, 3}, 1), F::full({1, 1, 3, 3}, 1), F{}, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.item() == 9.0f);
}

TEST_CASE("conv2d with a centered one-hot kernel is the identity") {
  CounterRng rng(1);
  const auto x = F::from({2, 1, 5, 4}, rng.uniform_vector<float>(40, -1, 1));
  std::vector<float> k(9, 0.f);
  k[4] = 1.f;
  const auto out = conv2d(x, F::from({1, 1, 3, 3}, k), F{}, 1, 1);
  CHECK(std::equal(out.data().begin(), out.data().end(), x.data().begin(), x.data().end()));
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  CounterRng rng(2);
  for (auto [stride, pad] : {std::pair<Index, Index>{1, 1}, {2, 0}, {2, 2}}) {
    const auto in = oracle::random_values(rng, 2 * 3 * 8 * 8), w = oracle::random_values(rng, 4 * 3 * 3 * 3),
               b = oracle::random_values(rng, 4);
    const auto got = conv2d(F::from({2, 3, 8, 8}, to_float(in)), F::from({4, 3, 3, 3}, to_float(w)),
                            F::from({4}, to_float(b)), stride, pad);
    CHECK(max_abs_diff(got.data(), oracle::conv2d(in, 2, 3, 8, 8, w, 4, 3, b, stride, pad)) < 1e-5);
  }
}

TEST_CASE("conv2d rejects mismatched channels and empty outputs") {
  CHECK_THROWS_AS(conv2d(F::zeros({1, 2, 4, 4}), F::zeros({1, 3, 3, 3}), F{}, 1, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(F::zeros({1, 1, 2, 2}), F::zeros({1, 1, 3, 3}), F{}, 1, 0), ConfigError);
}

TEST_CASE("bilinear sampling") {
  const std::vector<double> plane{1, 2, 3, 4};
  const std::span<const double> p(plane);
  CHECK(bilinear_sample(p, 2, 2, 0.5, 0.5) == doctest::Approx(2.5));
  CHECK(bilinear_sample(p, 2, 2, 1.0, 0.0) == 3.0);
  CHECK(bilinear_sample(p, 2, 2, 0.0, 1.0) == 2.0);
  CHECK(bilinear_sample(p, 2, 2, -2.0, 0.0) == 0.0);
  CHECK(bilinear_sample(p, 2, 2, 1e300, -1e300) == 0.0);
  CHECK(bilinear_sample(p, 2, 2, std::nan(""), 0.0) == 0.0);

  SUBCASE("agrees with the tent-function oracle and its finite differences") {
    CounterRng rng(3);
    const auto v = oracle::random_values(rng, 5 * 6);
    for (int i = 0; i < 200; ++i) {
      const double y = rng.uniform(-1.5, 5.5), x = rng.uniform(-1.5, 6.5);
      const auto s = bilinear_sample_with_grad(std::span<const double>(v), 5, 6, y, x);
      CHECK(s.value == doctest::Approx(oracle::bilinear(v, 5, 6, y, x)).epsilon(1e-12));
      if (std::abs(y - std::round(y)) > 1e-3 && std::abs(x - std::round(x)) > 1e-3) {
        const double h = 1e-6;
        CHECK(s.d_y == doctest::Approx((oracle::bilinear(v, 5, 6, y + h, x) - oracle::bilinear(v, 5, 6, y - h, x)) / (2 * h)).epsilon(1e-6));
        CHECK(s.d_x == doctest::Approx((oracle::bilinear(v, 5, 6, y, x + h) - oracle::bilinear(v, 5, 6, y, x - h)) / (2 * h)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("pointwise values") {
  CHECK(sigmoid(F::full({1}, 0)).item() == 0.5f);
  CHECK(safe_div(D::full({1}, 1), D::full({1}, 0)).item() == doctest::Approx(1e4));
  CHECK(softplus(D::full({1}, 0)).item() == doctest::Approx(std::log(2.0)));
  CHECK(silu(D::full({1}, 1)).item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(softplus(D::full({1}, 800)).item() == 800.0);
  CHECK_THROWS_AS(add(F::zeros({2, 3}), F::zeros({2, 4})), ConfigError);
}

TEST_CASE("broadcast mul against the explicit-loop oracle") {
  CounterRng rng(4);
  const auto w = rng.uniform_vector<double>(3, -1, 1), x = rng.uniform_vector<double>(2 * 3 * 4 * 5, -1, 1);
  const auto out = mul(D::from({1, 3, 1, 1}, w), D::from({2, 3, 4, 5}, x));
  CHECK(out.shape() == Shape{2, 3, 4, 5});
  bool exact = true;
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 20; ++i) {
        const Index k = (b * 3 + c) * 20 + i;
        exact = exact && out.data()[k] == w[c] * x[k];
      }
  CHECK(exact);
  CHECK(broadcast_shape({2, 1, 4}, {1, 3, 1}) == Shape{2, 3, 4});
}

TEST_CASE("reductions") {
  CounterRng rng(5);
  const auto x = D::from({2, 1, 3, 3}, rng.uniform_vector<double>(18, -1, 1));
  const auto mx = reduce(ReduceOp::max_channel, x), mean = reduce(ReduceOp::mean_channel, x);
  CHECK(std::equal(mx.data().begin(), mx.data().end(), x.data().begin()));
  CHECK(std::equal(mean.data().begin(), mean.data().end(), x.data().begin()));
  const auto gap = reduce(ReduceOp::global_avg_pool, D::full({1, 2, 3, 3}, 0.75));
  CHECK(gap.shape() == Shape{1, 2, 1, 1});
  CHECK(gap.data()[0] == doctest::Approx(0.75));

  SUBCASE("max_pool2d against the windowed-max oracle") {
    const auto v = oracle::random_values(rng, 4 * 36);
    const auto got = max_pool2d(D::from({1, 4, 6, 6}, v), 5, 1, 2);
    CHECK(max_abs_diff(got.data(), oracle::max_pool(v, 1, 4, 6, 6, 5, 1, 2)) == 0.0);
    CHECK_THROWS_AS(max_pool2d(D::from({1, 4, 6, 6}, v), 9, 1, 0), ConfigError);
  }

  SUBCASE("max routes the gradient to the first maximum") {
    const auto t = D::leaf({1, 2, 1, 2}, {1.0, 3.0, 3.0, 2.0});
    backward(sum_all(reduce(ReduceOp::max_channel, t)));
    CHECK(std::vector<double>(t.grad().begin(), t.grad().end()) == std::vector<double>{0, 1, 1, 0});
  }
}

TEST_CASE("linear") {
  CounterRng rng(6);
  const auto x = rng.uniform_vector<double>(6, -1, 1);
  const auto eye = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto same = linear(D::from({2, 3}, x), eye, D::zeros({3}));
  CHECK(std::equal(same.data().begin(), same.data().end(), x.begin()));
  const auto rows = linear(D::from({2, 3}, x), D::zeros({2, 3}), D::from({2}, {0.5, -2}));
  CHECK(std::vector<double>(rows.data().begin(), rows.data().end()) == std::vector<double>{0.5, -2, 0.5, -2});

  const auto w = rng.uniform_vector<double>(15, -1, 1), b = rng.uniform_vector<double>(5, -1, 1);
  const auto out = linear(D::from({2, 3}, x), D::from({5, 3}, w), D::from({5}, b));
  std::vector<double> ref;
  for (int r = 0; r < 2; ++r)
    for (int o = 0; o < 5; ++o) {
      double acc = b[o];
      for (int i = 0; i < 3; ++i) acc += w[o * 3 + i] * x[r * 3 + i];
      ref.push_back(acc);
    }
  CHECK(max_abs_diff(out.data(), ref) < 1e-6);
  CHECK_THROWS_AS(linear(D::from({2, 3}, x), D::zeros({5, 4}), D{}), ConfigError);
}

TEST_CASE("backward") {
  SUBCASE("sigma'(0) = 1/4") {
    const auto x = D::leaf({1}, {0.0});
    backward(sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25));
  }
  SUBCASE("parameters off the tape get zeros") {
    ParameterStore<double> store;
    const auto a = store.add("a", {2}, {1.0, 2.0});
    store.add("unused", {3}, {1.0, 1.0, 1.0});
    const auto grads = backward(sum_all(mul(a, a)), store);
    CHECK(std::vector<double>(grads.at("a").data().begin(), grads.at("a").data().end()) == std::vector<double>{2, 4});
    const auto z = grads.at("unused").data();
    CHECK(std::all_of(z.begin(), z.end(), [](double v) { return v == 0; }));
  }
  SUBCASE("non-scalar loss is a usage error") {
    const auto x = D::leaf({2}, {1.0, 2.0});
    CHECK_THROWS_AS(backward(x), UsageError);
  }
  SUBCASE("a shared subexpression accumulates once per use") {
    const auto x = D::leaf({1}, {3.0});
    const auto y = mul(x, x);
    backward(add(y, y));
    CHECK(x.grad()[0] == doctest::Approx(12.0));
  }
  SUBCASE("tape is topologically ordered") {
    const auto x = D::leaf({2}, {1.0, 2.0});
    const auto loss = sum_all(mul(exp(x), x));
    const auto tape = Tape<double>::record(loss);
    const auto& nodes = tape.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      for (const auto& in : nodes[i]->inputs) {
        const auto pos = std::find(nodes.begin(), nodes.end(), in.get()) - nodes.begin();
        CHECK(static_cast<std::size_t>(pos) < i);
      }
    }
  }
}

TEST_CASE("grad_check reference cases") {
  std::vector<D> ones{D::leaf({3}, {0.5, -1.0, 2.0})};
  CHECK(grad_check<double>([](const auto& x) { return sum_all(x[0]); }, ones, 0x1p-10) == 0.0);
  std::vector<D> sq{D::leaf({2}, {1.0, 2.0})};
  CHECK(grad_check<double>([](const auto& x) { return sum_all(mul(x[0], x[0])); }, sq, 1e-3) < 1e-9);

  SUBCASE("conv -> sigmoid -> sum, per element < 1e-6") {
    CounterRng rng(7);
    std::vector<D> in{D::leaf({1, 2, 5, 5}, rng.uniform_vector<double>(50, -1, 1)),
                      D::leaf({3, 2, 3, 3}, rng.uniform_vector<double>(54, -1, 1)),
                      D::leaf({3}, rng.uniform_vector<double>(3, -1, 1))};
    CHECK(grad_check<double>([](const auto& x) { return sum_all(sigmoid(conv2d(x[0], x[1], x[2], 1, 1))); }, in,
                             1e-3) < 1e-6);
  }
  SUBCASE("32-bit mode stays under 1e-3") {
    CounterRng rng(8);
    std::vector<F> in{F::leaf({1, 2, 4, 4}, rng.uniform_vector<float>(32, -1, 1)),
                      F::leaf({2, 2, 3, 3}, rng.uniform_vector<float>(36, -1, 1))};
    CHECK(grad_check<float>([](const auto& x) { return sum_all(silu(conv2d(x[0], x[1], F{}, 1, 1))); }, in, 1e-2) <
          1e-3);
  }
}

TEST_CASE("finite checks reject NaN results") {
  set_finite_checks(true);
  CHECK_THROWS_AS(mul(D::full({1}, INFINITY), D::full({1}, 0.0)), NumericError);
  set_finite_checks(false);
  CHECK_NOTHROW(mul(D::full({1}, INFINITY), D::full({1}, 0.0)));
}

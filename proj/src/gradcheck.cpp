#include "uavd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace uavd {

template <typename T>
double grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>>& inputs, double h) {
  for (auto& in : inputs) in.zero_grad();
  const Tensor<T> out = f(inputs);
  if (out.size() != 1) throw UsageError("grad_check needs a scalar-valued function");
  backward(out);

  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    auto g = in.grad();
    analytic.emplace_back(g.empty() ? std::vector<double>(static_cast<std::size_t>(in.size()), 0.0)
                                    : std::vector<double>(g.begin(), g.end()));
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = static_cast<T>(saved + h);
      const double up = f(inputs).item();
      data[i] = static_cast<T>(saved - h);
      const double down = f(inputs).item();
      data[i] = saved;
      const double cd = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
      worst = std::max(worst, err);
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return worst;
}

template double grad_check<float>(const ScalarFn<float>&, std::vector<Tensor<float>>&, double);
template double grad_check<double>(const ScalarFn<double>&, std::vector<Tensor<double>>&, double);

}  // namespace uavd

#pragma once

#include <functional>
#include <vector>

#include "uavd/tensor.hpp"

namespace uavd {

template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Max over every element of every input of
///   |analytic - central difference| / max(|analytic|, |central difference|, 1e-8).
/// `inputs` must be leaves; they are perturbed in place and restored.
template <typename T>
double grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>>& inputs, double h);

}  // namespace uavd

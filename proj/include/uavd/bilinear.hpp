#pragma once

#include <cmath>
#include <span>

#include "uavd/tensor.hpp"

namespace uavd {

namespace detail {

// floor for |v| < 2^62; callers clamp before converting.
template <typename T>
inline Index floor_index(T v) {
  const Index i = static_cast<Index>(v);
  return static_cast<T>(i) > v ? i - 1 : i;
}

// Keeps coordinates far outside any plane finite and convertible; NaN maps
// outside the plane.
template <typename T>
inline T clamp_coord(T v) {
  constexpr T kFar = T(1) * (1 << 30);
  if (!(v == v)) return kFar;
  return v > kFar ? kFar : (v < -kFar ? -kFar : v);
}

}  // namespace detail

/// Value and coordinate derivatives of a bilinear sample.
template <typename T>
struct BilinearSample {
  T value;
  T d_y;
  T d_x;
};

/// Bilinear interpolation of a row-major [height, width] plane at fractional
/// (y, x). Each of the four neighbors that falls outside the plane contributes
/// zero, so samples far outside the plane are exactly 0.
template <typename T>
inline BilinearSample<T> bilinear_sample_with_grad(std::span<const T> plane, Index height,
                                                   Index width, T y, T x) {
  y = detail::clamp_coord(y);
  x = detail::clamp_coord(x);
  const Index y0 = detail::floor_index(y);
  const Index x0 = detail::floor_index(x);
  const T ly = y - static_cast<T>(y0);
  const T lx = x - static_cast<T>(x0);
  const T hy = T(1) - ly;
  const T hx = T(1) - lx;
  auto pick = [&](Index yy, Index xx) -> T {
    if (yy < 0 || yy >= height || xx < 0 || xx >= width) return T(0);
    return plane[static_cast<std::size_t>(yy * width + xx)];
  };
  const T v00 = pick(y0, x0);
  const T v01 = pick(y0, x0 + 1);
  const T v10 = pick(y0 + 1, x0);
  const T v11 = pick(y0 + 1, x0 + 1);
  BilinearSample<T> s;
  s.value = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
  s.d_y = hx * (v10 - v00) + lx * (v11 - v01);
  s.d_x = hy * (v01 - v00) + ly * (v11 - v10);
  return s;
}

template <typename T>
inline T bilinear_sample(std::span<const T> plane, Index height, Index width, T y, T x) {
  return bilinear_sample_with_grad(plane, height, width, y, x).value;
}

/// Adds `g` times the interpolation weights into the in-bounds neighbors of
/// (y, x); the adjoint of bilinear_sample with respect to the plane.
template <typename T>
inline void bilinear_scatter(std::span<T> plane, Index height, Index width, T y, T x, T g) {
  y = detail::clamp_coord(y);
  x = detail::clamp_coord(x);
  const Index y0 = detail::floor_index(y);
  const Index x0 = detail::floor_index(x);
  const T ly = y - static_cast<T>(y0);
  const T lx = x - static_cast<T>(x0);
  const T hy = T(1) - ly;
  const T hx = T(1) - lx;
  auto put = [&](Index yy, Index xx, T w) {
    if (yy < 0 || yy >= height || xx < 0 || xx >= width) return;
    plane[static_cast<std::size_t>(yy * width + xx)] += g * w;
  };
  put(y0, x0, hy * hx);
  put(y0, x0 + 1, hy * lx);
  put(y0 + 1, x0, ly * hx);
  put(y0 + 1, x0 + 1, ly * lx);
}

}  // namespace uavd

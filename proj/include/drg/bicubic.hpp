// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "drg/errors.hpp"
#include "drg/tensor.hpp"

namespace drg {

/// Side length after downsampling by an integer factor, round-half-up.
/// Both spatial dimensions use this value.
inline int degraded_size(int base, int factor) {
  if (factor < 1) throw std::invalid_argument("degraded_size: factor < 1");
  if (factor > base)
    throw std::invalid_argument("degraded_size: factor > base size");
  return (2 * base + factor) / (2 * factor);
}

/// Keys piecewise-cubic interpolation kernel. a = -0.5 is the Catmull-Rom
/// convention.
inline double bicubic_kernel(double t, double a) {
  const double x = std::fabs(t);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return a * (((x - 5.0) * x + 8.0) * x - 4.0);
  return 0.0;
}

namespace detail {

struct TapWeights {
  int base;          // first source index (may be out of range; clamp on use)
  double w[4];
};

/// Per-output-position taps for one axis, half-pixel center convention.
/// Weights are normalized to sum exactly to 1 so constants reproduce
/// bit-exactly after rounding.
inline std::vector<TapWeights> axis_taps(int in_n, int out_n, double a) {
  std::vector<TapWeights> taps(static_cast<std::size_t>(out_n));
  const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
  for (int o = 0; o < out_n; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double fl = std::floor(src);
    const int i0 = static_cast<int>(fl) - 1;
    const double frac = src - fl;
    double sum = 0.0;
    TapWeights tw;
    tw.base = i0;
    for (int k = 0; k < 4; ++k) {
      const double t = frac + 1.0 - static_cast<double>(k);
      tw.w[k] = bicubic_kernel(t, a);
      sum += tw.w[k];
    }
    for (double& w : tw.w) w /= sum;
    taps[static_cast<std::size_t>(o)] = tw;
  }
  return taps;
}

}  // namespace detail

/// Separable bicubic resampling of an H x W x C channel-last image with
/// edge-clamped sampling. Output values are clipped to [0, 1].
template <typename T>
Tensor<T> resize_bicubic(const Tensor<T>& img, int out_h, int out_w,
                         double a = -0.5) {
  if (img.rank() != 3) throw std::invalid_argument("resize_bicubic: rank != 3");
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_bicubic: output size < 1");
  if (!img.all_finite())
    throw NumericError("resize_bicubic: non-finite input");

  const int in_h = static_cast<int>(img.dim(0));
  const int in_w = static_cast<int>(img.dim(1));
  const std::size_t c = img.dim(2);

  const auto tx = detail::axis_taps(in_w, out_w, a);
  const auto ty = detail::axis_taps(in_h, out_h, a);

  // Horizontal pass into a double buffer, then vertical pass.
  std::vector<double> mid(static_cast<std::size_t>(in_h) *
                          static_cast<std::size_t>(out_w) * c);
  for (int y = 0; y < in_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto& t = tx[static_cast<std::size_t>(x)];
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int sx = std::clamp(t.base + k, 0, in_w - 1);
          acc += t.w[k] * static_cast<double>(img(
                              static_cast<std::size_t>(y),
                              static_cast<std::size_t>(sx), ch));
        }
        mid[(static_cast<std::size_t>(y) * static_cast<std::size_t>(out_w) +
             static_cast<std::size_t>(x)) *
                c +
            ch] = acc;
      }
    }
  }

  Tensor<T> out({static_cast<std::size_t>(out_h),
                 static_cast<std::size_t>(out_w), c});
  for (int y = 0; y < out_h; ++y) {
    const auto& t = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int sy = std::clamp(t.base + k, 0, in_h - 1);
          acc += t.w[k] *
                 mid[(static_cast<std::size_t>(sy) *
                          static_cast<std::size_t>(out_w) +
                      static_cast<std::size_t>(x)) *
                         c +
                     ch];
        }
        out(static_cast<std::size_t>(y), static_cast<std::size_t>(x), ch) =
            static_cast<T>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace drg

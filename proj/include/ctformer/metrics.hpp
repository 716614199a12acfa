// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Image quality metrics: single-scale SSIM and RMSE.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  // Data range; <= 0 means max - min of the reference image.
  double data_range = 0.0;
};

/// Mean SSIM and the mean of its contrast-structure factor
/// (2 s_ab + C2) / (s_a^2 + s_b^2 + C2) over valid windows.
struct SsimResult {
  double ssim = 0.0;
  double contrast_structure = 0.0;
};

namespace metrics_detail {

inline std::pair<std::int64_t, std::int64_t> image_hw(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 1) return {t.dim(2), t.dim(3)};
  throw ShapeError("expected an image [h, w] or [1, 1, h, w], got " + t.shape().str());
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
    total += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable valid-mode filtering of an h x w field.
inline std::vector<double> filter_valid(const std::vector<double>& f, std::int64_t h, std::int64_t w,
                                        const std::vector<double>& k) {
  const auto ks = static_cast<std::int64_t>(k.size());
  const std::int64_t oh = h - ks + 1, ow = w - ks + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < ks; ++i) acc += k[static_cast<std::size_t>(i)] * f[static_cast<std::size_t>(y * w + x + i)];
      rows[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < ks; ++i) acc += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>((y + i) * ow + x)];
      out[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  }
  return out;
}

}  // namespace metrics_detail

inline SsimResult ssim_detailed(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
  const auto [h, w] = metrics_detail::image_hw(a);
  if (metrics_detail::image_hw(b) != std::pair{h, w}) {
    throw ShapeError("ssim: image shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
  if (h < opt.window || w < opt.window) throw ShapeError("ssim: image smaller than the window");
  double range = opt.data_range;
  if (range <= 0.0) {
    const auto [lo, hi] = std::minmax_element(b.data().begin(), b.data().end());
    range = static_cast<double>(*hi) - static_cast<double>(*lo);
    if (range <= 0.0) range = 1.0;
  }
  const double c1 = (opt.k1 * range) * (opt.k1 * range);
  const double c2 = (opt.k2 * range) * (opt.k2 * range);

  const std::size_t n = a.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = metrics_detail::gaussian_kernel(opt.window, opt.sigma);
  const auto mx = metrics_detail::filter_valid(x, h, w, k);
  const auto my = metrics_detail::filter_valid(y, h, w, k);
  const auto mxx = metrics_detail::filter_valid(xx, h, w, k);
  const auto myy = metrics_detail::filter_valid(yy, h, w, k);
  const auto mxy = metrics_detail::filter_valid(xy, h, w, k);

  SsimResult r;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    const double lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
    const double cs = (2.0 * cxy + c2) / (vx + vy + c2);
    r.ssim += lum * cs;
    r.contrast_structure += cs;
  }
  r.ssim /= static_cast<double>(mx.size());
  r.contrast_structure /= static_cast<double>(mx.size());
  return r;
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, data range of the reference `b`, averaged over valid windows.
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
  return ssim_detailed(a, b, opt).ssim;
}

inline double rmse(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("rmse: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  if (a.size() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

}  // namespace ctformer

// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Random ellipse phantoms with synthetic low-dose noise.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/io.hpp"
#include "ctformer/rng.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

struct Ellipse {
  double cy = 0.0, cx = 0.0;  // centre, in [-1, 1] image coordinates
  double ay = 0.5, ax = 0.5;  // semi-axes
  double angle = 0.0;         // radians
  double intensity = 0.5;     // added inside the ellipse
};

struct NoiseSpec {
  double sigma_lo = 0.02;
  double sigma_hi = 0.08;
  // Photon-count scale of the signal-dependent part: its standard deviation
  // is sqrt(clean / poisson_scale).
  double poisson_scale = 4000.0;
};

struct PhantomSpec {
  std::int64_t size = 64;
  int min_ellipses = 3;
  int max_ellipses = 8;
  NoiseSpec noise;
};

struct Phantom {
  std::vector<Ellipse> ellipses;
  double sigma = 0.0;  // Gaussian noise level used for `ld`
  Tensor nd;           // [size, size] in [0, 1]
  Tensor ld;           // [size, size] in [0, 1]
};

inline Tensor render_ellipses(const std::vector<Ellipse>& ellipses, std::int64_t size) {
  Tensor img(Shape{size, size});
  for (std::int64_t i = 0; i < size; ++i) {
    const double y = 2.0 * (i + 0.5) / static_cast<double>(size) - 1.0;
    for (std::int64_t j = 0; j < size; ++j) {
      const double x = 2.0 * (j + 0.5) / static_cast<double>(size) - 1.0;
      double v = 0.0;
      for (const Ellipse& e : ellipses) {
        const double c = std::cos(e.angle), s = std::sin(e.angle);
        const double dy = y - e.cy, dx = x - e.cx;
        const double u = (c * dx + s * dy) / e.ax;
        const double w = (-s * dx + c * dy) / e.ay;
        if (u * u + w * w <= 1.0) v += e.intensity;
      }
      img.at(i, j) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

/// One phantom: a body ellipse plus smaller random ellipses, and a noisy copy.
inline Phantom make_phantom(const PhantomSpec& spec, Rng& rng) {
  if (spec.size < 1 || spec.min_ellipses < 1 || spec.max_ellipses < spec.min_ellipses) {
    throw ConfigError("invalid phantom spec");
  }
  Phantom p;
  const int count = static_cast<int>(rng.range(spec.min_ellipses, spec.max_ellipses));
  p.ellipses.push_back({0.0, 0.0, rng.uniform(0.7, 0.9), rng.uniform(0.6, 0.85), rng.uniform(-0.3, 0.3),
                        rng.uniform(0.2, 0.4)});
  for (int i = 1; i < count; ++i) {
    Ellipse e;
    e.cy = rng.uniform(-0.6, 0.6);
    e.cx = rng.uniform(-0.6, 0.6);
    e.ay = rng.uniform(0.05, 0.35);
    e.ax = rng.uniform(0.05, 0.35);
    e.angle = rng.uniform(0.0, std::numbers::pi);
    e.intensity = rng.uniform(-0.15, 0.45);
    p.ellipses.push_back(e);
  }
  p.nd = render_ellipses(p.ellipses, spec.size);
  p.sigma = rng.uniform(spec.noise.sigma_lo, spec.noise.sigma_hi);
  p.ld = p.nd.clone();
  for (float& v : p.ld.data()) {
    const double photon = std::sqrt(std::max(0.0, static_cast<double>(v)) / spec.noise.poisson_scale);
    const double noisy = v + p.sigma * rng.normal() + photon * rng.normal();
    v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }
  return p;
}

inline std::vector<Phantom> make_phantom_set(int count, const PhantomSpec& spec, std::uint64_t seed) {
  std::vector<Phantom> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    out.push_back(make_phantom(spec, rng));
  }
  return out;
}

inline Dataset to_dataset(const std::vector<Phantom>& phantoms) {
  Dataset ds;
  for (std::size_t i = 0; i < phantoms.size(); ++i) {
    ds.push_back({"phantom_" + std::to_string(i), phantoms[i].ld, phantoms[i].nd});
  }
  return ds;
}

/// Writes ld_XXXX.ctf / nd_XXXX.ctf pairs and manifest.txt into `dir`.
/// Returns the manifest path.
inline std::filesystem::path make_phantoms(int count, const PhantomSpec& spec, std::uint64_t seed,
                                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  const auto phantoms = make_phantom_set(count, spec, seed);
  for (std::size_t i = 0; i < phantoms.size(); ++i) {
    char stem[24];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    const auto ld = dir / (std::string("ld_") + stem + ".ctf");
    const auto nd = dir / (std::string("nd_") + stem + ".ctf");
    save_tensor(ld, phantoms[i].ld);
    save_tensor(nd, phantoms[i].nd);
    m.pairs.push_back({ld, nd, std::string("phantom_") + stem});
  }
  const auto path = dir / "manifest.txt";
  write_manifest(path, m);
  return path;
}

}  // namespace ctformer

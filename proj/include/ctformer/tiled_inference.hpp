// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Overlapped patch inference. Patches start every p - 2*margin pixels
// (clamped to stay inside the image); each keeps only its central cell, and
// the cells partition the image.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

/// One axis of a grid: patch origin and the half-open range it keeps.
struct GridCell {
  std::int64_t origin = 0;
  std::int64_t keep_begin = 0;
  std::int64_t keep_end = 0;

  bool empty() const { return keep_end <= keep_begin; }
};

struct PatchGrid {
  std::int64_t image_size = 0;
  std::int64_t patch = 0;
  std::int64_t margin = 0;
  std::vector<GridCell> cells;  // identical along both axes

  std::int64_t stride() const { return patch - 2 * margin; }
  std::int64_t patches_per_axis() const { return static_cast<std::int64_t>(cells.size()); }
  std::int64_t patch_count() const { return patches_per_axis() * patches_per_axis(); }

  /// Kept-range boundaries strictly inside the image.
  std::vector<std::int64_t> seams() const {
    std::vector<std::int64_t> s;
    for (const GridCell& c : cells) {
      if (!c.empty() && c.keep_begin > 0 && (s.empty() || s.back() != c.keep_begin)) s.push_back(c.keep_begin);
    }
    return s;
  }
};

inline PatchGrid plan_grid(std::int64_t n, std::int64_t p, std::int64_t margin) {
  if (margin < 0) throw ContractError("plan_grid: margin must be non-negative");
  if (p - 2 * margin < 1) throw ContractError("plan_grid: p - 2*margin must be >= 1");
  if (p < 1 || p > n) throw ContractError("plan_grid: patch size must lie in [1, image size]");
  PatchGrid g{n, p, margin, {}};
  const std::int64_t s = g.stride();
  for (std::int64_t start = 0; start < n; start += s) {
    GridCell c;
    c.origin = std::min(start, n - p);
    c.keep_begin = start == 0 ? 0 : std::min(start + margin, n);
    c.keep_end = std::min(start + s + margin, n);
    g.cells.push_back(c);
  }
  g.cells.back().keep_end = n;
  return g;
}

/// Extra cost of overlapped inference relative to non-overlapped tiling.
inline double cost_ratio(std::int64_t n, std::int64_t p, std::int64_t margin) {
  if (p - 2 * margin < 1 || margin < 0) throw ContractError("cost_ratio: p - 2*margin must be >= 1");
  const auto ceil_div = [](std::int64_t a, std::int64_t b) { return (a + b - 1) / b; };
  const double r = static_cast<double>(ceil_div(n, p - 2 * margin)) / static_cast<double>(ceil_div(n, p));
  return r * r;
}

/// How many kept cells cover each pixel; all ones for a valid grid.
inline Tensor coverage_map(const PatchGrid& g) {
  Tensor cov(Shape{g.image_size, g.image_size});
  for (const GridCell& r : g.cells) {
    for (const GridCell& c : g.cells) {
      for (std::int64_t y = r.keep_begin; y < r.keep_end; ++y) {
        for (std::int64_t x = c.keep_begin; x < c.keep_end; ++x) cov.at(y, x) += 1.0F;
      }
    }
  }
  return cov;
}

/// Anything that maps a batch of [b, 1, p, p] patches to denoised patches.
template <typename M>
concept PatchModel = requires(const M& m, const Tensor& t) {
  { m.patch_size() } -> std::convertible_to<std::int64_t>;
  { m.denoise_patches(t) } -> std::convertible_to<Tensor>;
};

/// Denoises an [n, n] or [1, 1, n, n] image; the output has the input's
/// shape. Patches are evaluated `batch` at a time.
template <PatchModel M>
Tensor denoise_image(const M& model, const Tensor& image, std::int64_t margin, std::int64_t batch = 8) {
  std::int64_t n = 0;
  if (image.rank() == 2 && image.dim(0) == image.dim(1)) {
    n = image.dim(0);
  } else if (image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 1 && image.dim(2) == image.dim(3)) {
    n = image.dim(2);
  } else {
    throw ShapeError("denoise_image expects a square [n, n] or [1, 1, n, n] image, got " + image.shape().str());
  }
  const std::int64_t p = model.patch_size();
  if (n < p) throw DataError("image size " + std::to_string(n) + " is smaller than patch " + std::to_string(p));
  const PatchGrid g = plan_grid(n, p, margin);
  batch = std::max<std::int64_t>(batch, 1);

  struct Job {
    const GridCell* row;
    const GridCell* col;
  };
  std::vector<Job> jobs;
  for (const GridCell& r : g.cells) {
    for (const GridCell& c : g.cells) jobs.push_back({&r, &c});
  }

  Tensor out(image.shape());
  const float* src = image.data().data();
  float* dst = out.data().data();
  for (std::size_t first = 0; first < jobs.size(); first += static_cast<std::size_t>(batch)) {
    const std::size_t count = std::min(jobs.size() - first, static_cast<std::size_t>(batch));
    Tensor patches(Shape{static_cast<std::int64_t>(count), 1, p, p});
    for (std::size_t k = 0; k < count; ++k) {
      const Job& j = jobs[first + k];
      float* pd = patches.data().data() + static_cast<std::int64_t>(k) * p * p;
      for (std::int64_t y = 0; y < p; ++y) {
        const float* row = src + (j.row->origin + y) * n + j.col->origin;
        std::copy(row, row + p, pd + y * p);
      }
    }
    const Tensor denoised = model.denoise_patches(patches);
    if (denoised.shape() != patches.shape()) throw ShapeError("patch model changed the patch shape");
    for (std::size_t k = 0; k < count; ++k) {
      const Job& j = jobs[first + k];
      const float* pd = denoised.data().data() + static_cast<std::int64_t>(k) * p * p;
      for (std::int64_t y = j.row->keep_begin; y < j.row->keep_end; ++y) {
        for (std::int64_t x = j.col->keep_begin; x < j.col->keep_end; ++x) {
          dst[y * n + x] = pd[(y - j.row->origin) * p + (x - j.col->origin)];
        }
      }
    }
  }
  return out;
}

/// Mean absolute residual over pixels whose row or column lies within 2
/// pixels of an internal seam (seam at b: rows/columns b-2 .. b+1).
inline double boundary_energy(const Tensor& residual, const PatchGrid& g, std::int64_t band = 2) {
  const std::int64_t n = g.image_size;
  if (static_cast<std::int64_t>(residual.size()) != n * n) {
    throw ShapeError("boundary_energy: residual " + residual.shape().str() + " does not match the grid");
  }
  std::vector<char> near(static_cast<std::size_t>(n), 0);
  for (std::int64_t s : g.seams()) {
    for (std::int64_t i = std::max<std::int64_t>(0, s - band); i < std::min(n, s + band); ++i) {
      near[static_cast<std::size_t>(i)] = 1;
    }
  }
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      if (near[static_cast<std::size_t>(y)] || near[static_cast<std::size_t>(x)]) {
        acc += std::abs(residual[static_cast<std::size_t>(y * n + x)]);
        ++count;
      }
    }
  }
  if (count == 0) {
    // A single tile has no internal seams; fall back to the whole image.
    for (float v : residual.data()) acc += std::abs(v);
    return acc / static_cast<double>(residual.size());
  }
  return acc / static_cast<double>(count);
}

}  // namespace ctformer

// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ctformer/model.hpp"
#include "ctformer/tiled_inference.hpp"

namespace ctformer {
namespace {

// Returns its input unchanged.
struct IdentityModel {
  std::int64_t p = 64;
  std::int64_t patch_size() const { return p; }
  Tensor denoise_patches(const Tensor& t) const { return t.clone(); }
};

// Adds +delta to the outer `width` pixels of every patch, a worst case for
// stitching seams.
struct BorderBiasedModel {
  std::int64_t p = 64;
  float delta = 1.0F;
  std::int64_t width = 4;
  std::int64_t patch_size() const { return p; }
  Tensor denoise_patches(const Tensor& t) const {
    Tensor out = t.clone();
    for (std::int64_t b = 0; b < t.dim(0); ++b)
      for (std::int64_t y = 0; y < p; ++y)
        for (std::int64_t x = 0; x < p; ++x)
          if (y < width || x < width || y >= p - width || x >= p - width) out.at(b, 0, y, x) += delta;
    return out;
  }
};

Tensor ramp_image(std::int64_t n) {
  Tensor img(Shape{1, 1, n, n});
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) img.at(0, 0, y, x) = 0.001F * static_cast<float>(y * n + x) / n;
  return img;
}

TEST(PlanGrid, NonOverlapping) {
  const PatchGrid g = plan_grid(512, 64, 0);
  ASSERT_EQ(g.patches_per_axis(), 8);
  for (std::int64_t i = 0; i < 8; ++i) {
    EXPECT_EQ(g.cells[i].origin, 64 * i);
    EXPECT_EQ(g.cells[i].keep_begin, 64 * i);
    EXPECT_EQ(g.cells[i].keep_end, 64 * (i + 1));
  }
}

TEST(PlanGrid, PaperMargin) {
  const PatchGrid g = plan_grid(512, 64, 16);
  ASSERT_EQ(g.patches_per_axis(), 16);
  EXPECT_EQ(g.stride(), 32);
  for (std::int64_t i = 0; i < 15; ++i) EXPECT_EQ(g.cells[i].origin, 32 * i);
  // The last origin is clamped so the patch stays inside the image.
  EXPECT_EQ(g.cells[15].origin, 448);
  EXPECT_EQ(g.cells[0].keep_begin, 0);
  EXPECT_EQ(g.cells[0].keep_end, 48);
  EXPECT_EQ(g.cells[1].keep_begin, 48);
  EXPECT_EQ(g.cells[15].keep_end, 512);
}

TEST(PlanGrid, ClampedFinalOrigin) {
  const PatchGrid g = plan_grid(65, 64, 16);
  EXPECT_EQ(g.cells.back().origin, 1);
  const Tensor cov = coverage_map(g);
  for (float v : cov.values()) ASSERT_EQ(v, 1.0F);
}

TEST(PlanGrid, ContractErrors) {
  EXPECT_THROW(plan_grid(512, 64, 32), ContractError);
  EXPECT_THROW(plan_grid(512, 64, -1), ContractError);
  EXPECT_THROW(plan_grid(32, 64, 0), ContractError);
  EXPECT_THROW(cost_ratio(512, 64, 40), ContractError);
}

TEST(CostRatio, Examples) {
  EXPECT_DOUBLE_EQ(cost_ratio(512, 64, 16), 4.0);
  EXPECT_DOUBLE_EQ(cost_ratio(512, 64, 0), 1.0);
  EXPECT_DOUBLE_EQ(cost_ratio(512, 64, 20), 7.5625);
}

TEST(CostRatio, UnitAtZeroMarginAndMonotone) {
  for (std::int64_t n = 64; n <= 600; n += 7)
    for (std::int64_t p : {8, 32, 64}) {
      EXPECT_DOUBLE_EQ(cost_ratio(n, p, 0), 1.0);
      for (std::int64_t m = 1; p - 2 * m >= 1; ++m) EXPECT_GE(cost_ratio(n, p, m), cost_ratio(n, p, m - 1));
    }
}

TEST(CostRatio, MatchesPlannedPatchCount) {
  for (std::int64_t m = 0; m <= 24; ++m) {
    const double planned = static_cast<double>(plan_grid(512, 64, m).patch_count()) / plan_grid(512, 64, 0).patch_count();
    EXPECT_DOUBLE_EQ(planned, cost_ratio(512, 64, m)) << "margin " << m;
  }
}

TEST(PlanGrid, KeptRangesPartitionEveryAxis) {
  for (std::int64_t n = 65; n <= 512; ++n)
    for (std::int64_t m = 0; m <= 24; ++m) {
      const PatchGrid g = plan_grid(n, 64, m);
      std::vector<int> hits(static_cast<std::size_t>(n), 0);
      for (const GridCell& c : g.cells) {
        ASSERT_GE(c.origin, 0);
        ASSERT_LE(c.origin + 64, n);
        for (std::int64_t i = c.keep_begin; i < c.keep_end; ++i) {
          ++hits[static_cast<std::size_t>(i)];
          // Kept pixels come from inside their own patch, at least `m` from
          // any patch edge that is not also an image edge.
          const std::int64_t local = i - c.origin;
          ASSERT_TRUE(local >= 0 && local < 64);
          if (i >= m) {
            ASSERT_GE(local, m) << n << " " << m;
          }
          if (i < n - m) {
            ASSERT_LT(local, 64 - m) << n << " " << m;
          }
        }
      }
      for (int h : hits) ASSERT_EQ(h, 1) << "n " << n << " margin " << m;
    }
}

TEST(PlanGrid, CoverageMapAllOnes) {
  for (std::int64_t n : {65, 100, 128, 257, 512})
    for (std::int64_t m : {0, 4, 8, 12, 16}) {
      const Tensor cov = coverage_map(plan_grid(n, 64, m));
      for (float v : cov.values()) ASSERT_EQ(v, 1.0F) << n << " " << m;
    }
}

TEST(DenoiseImage, IdentityModelIsExact) {
  const Tensor img = ramp_image(150);
  for (std::int64_t m : {0, 4, 8, 12, 16, 20}) EXPECT_EQ(denoise_image(IdentityModel{}, img, m).values(), img.values());
  // Rank-2 input keeps its shape.
  const Tensor flat = reshape(img, Shape{150, 150});
  EXPECT_EQ(denoise_image(IdentityModel{}, flat, 16).shape(), flat.shape());
}

TEST(DenoiseImage, ZeroedCTformerIsExact) {
  CTformerModel model = build(ModelConfig{});
  for (std::size_t i = 0; i < model.layers(); ++i) {
    TransformerBlockWeights& w = model.block(i);
    for (Tensor* t : {&w.mlp_in.fc1_w, &w.mlp_in.fc2_w, &w.attn.w_q, &w.attn.w_k, &w.attn.w_v, &w.attn.w_o,
                      &w.mlp_out.fc1_w, &w.mlp_out.fc2_w})
      t->fill(0.0F);
  }
  model.find_parameter("detokenize.weight")->fill(0.0F);
  const Tensor img = ramp_image(100);
  for (std::int64_t m : {0, 16}) EXPECT_EQ(denoise_image(model, img, m).values(), img.values());
}

TEST(DenoiseImage, BorderBiasVanishesWithMargin) {
  const std::int64_t n = 256;
  const Tensor img = ramp_image(n);
  const BorderBiasedModel model;
  const Tensor r0 = sub(denoise_image(model, img, 0), img);
  const Tensor r8 = sub(denoise_image(model, img, 8), img);
  // Without a margin the bias repeats at every tile edge.
  for (std::int64_t k = 1; k < n / 64; ++k) {
    EXPECT_NEAR(r0.at(0, 0, 64 * k, 100), 1.0F, 1e-6);
    EXPECT_NEAR(r0.at(0, 0, 64 * k - 1, 100), 1.0F, 1e-6);
    EXPECT_NEAR(r0.at(0, 0, 100, 64 * k), 1.0F, 1e-6);
  }
  EXPECT_NEAR(r0.at(0, 0, 32, 32), 0.0F, 1e-6);
  // With margin 8 only the outer image border keeps it.
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) {
      const bool border = y < 4 || x < 4 || y >= n - 4 || x >= n - 4;
      ASSERT_NEAR(r8.at(0, 0, y, x), border ? 1.0F : 0.0F, 1e-6) << y << "," << x;
    }
  EXPECT_GT(boundary_energy(r0, plan_grid(n, 64, 0)), boundary_energy(r8, plan_grid(n, 64, 8)));
}

TEST(DenoiseImage, ImageSmallerThanPatchIsDataError) {
  EXPECT_THROW(denoise_image(IdentityModel{}, Tensor({1, 1, 63, 63}), 0), DataError);
  EXPECT_THROW(denoise_image(IdentityModel{}, Tensor({1, 1, 64, 65}), 0), ShapeError);
}

TEST(DenoiseImage, DeterministicWithRealModel) {
  const CTformerModel model = build(ModelConfig{});
  Rng rng(3);
  const Tensor img = Tensor::uniform({1, 1, 96, 96}, rng, 0.0F, 1.0F);
  const Tensor a = denoise_image(model, img, 16, 3);
  EXPECT_EQ(denoise_image(model, img, 16, 3).values(), a.values());
  // Other batch sizes change GEMM blocking, so only rounding may differ.
  const Tensor b = denoise_image(model, img, 16, 8);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-6);
}

TEST(BoundaryEnergy, Examples) {
  const PatchGrid g = plan_grid(128, 64, 16);
  EXPECT_EQ(boundary_energy(Tensor({128, 128}), g), 0.0);
  EXPECT_DOUBLE_EQ(boundary_energy(Tensor::full({128, 128}, -0.25F), g), 0.25);
  // Mean over rows/columns within two pixels of each seam.
  Tensor r(Shape{128, 128});
  const std::int64_t seam = g.seams().at(0);
  for (std::int64_t x = 0; x < 128; ++x) r.at(seam, x) = 1.0F;
  std::int64_t band_pixels = 0;
  std::vector<char> near(128, 0);
  for (std::int64_t s : g.seams())
    for (std::int64_t i = s - 2; i < s + 2; ++i) near[i] = 1;
  for (std::int64_t y = 0; y < 128; ++y)
    for (std::int64_t x = 0; x < 128; ++x) band_pixels += near[y] || near[x];
  EXPECT_NEAR(boundary_energy(r, g), 128.0 / band_pixels, 1e-12);
  EXPECT_THROW(boundary_energy(Tensor({64, 64}), g), ShapeError);
}

}  // namespace
}  // namespace ctformer

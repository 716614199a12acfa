// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ctformer/attention.hpp"
#include "ctformer/grad_check.hpp"

namespace ctformer {
namespace {

// softmax(q k^T / sqrt(d)) v in double, one (batch, head) slice at a time.
std::vector<double> dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::int64_t b = q.dim(0), h = q.dim(1), n = q.dim(2), d = q.dim(3);
  std::vector<double> out(static_cast<std::size_t>(b * h * n * d));
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t hi = 0; hi < h; ++hi)
      for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> s(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (std::int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < d; ++c) acc += double(q.at(bi, hi, i, c)) * k.at(bi, hi, j, c);
          s[j] = acc / std::sqrt(double(d));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::int64_t c = 0; c < d; ++c) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < n; ++j) acc += s[j] / z * v.at(bi, hi, j, c);
          out[((bi * h + hi) * n + i) * d + c] = acc;
        }
      }
  return out;
}

double relative_error(const Tensor& approx, const Tensor& exact) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    num += std::pow(double(approx[i]) - exact[i], 2);
    den += std::pow(double(exact[i]), 2);
  }
  return std::sqrt(num / den);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TransformerBlockWeights make_block(const BlockShape& s, Rng& rng, float stddev = 0.1F) {
  return create_block_weights(s, [&](const std::string&, const Shape& shape, Init init) {
    switch (init) {
      case Init::kZeros: return Tensor::zeros(shape);
      case Init::kOnes: return Tensor::full(shape, 1.0F);
      default: return Tensor::randn(shape, rng, stddev);
    }
  });
}

TEST(ProjectQkv, IdentityWeightsCopyInput) {
  Rng rng(1);
  const Tensor t = Tensor::randn({2, 5, 4}, rng);
  AttentionWeights w{Tensor::eye(4), Tensor::eye(4), Tensor::eye(4), Tensor::eye(4), 1};
  const Qkv qkv = project_qkv(t, w);
  EXPECT_EQ(qkv.q.shape(), (Shape{2, 1, 5, 4}));
  EXPECT_EQ(qkv.q.values(), t.values());
}

TEST(ProjectQkv, ZeroInputGivesZeros) {
  Rng rng(2);
  AttentionWeights w{Tensor::randn({6, 6}, rng), Tensor::randn({6, 6}, rng), Tensor::randn({6, 6}, rng),
                     Tensor::randn({6, 6}, rng), 2};
  const Qkv qkv = project_qkv(Tensor::zeros({1, 3, 6}), w);
  for (const Tensor* t : {&qkv.q, &qkv.k, &qkv.v})
    for (float x : t->values()) EXPECT_EQ(x, 0.0F);
}

TEST(ProjectQkv, MatchesDenseMatmulThenSplit) {
  Rng rng(3);
  const Tensor t = Tensor::randn({1, 4, 6}, rng);
  AttentionWeights w{Tensor::randn({6, 6}, rng), Tensor::randn({6, 6}, rng), Tensor::randn({6, 6}, rng),
                     Tensor::randn({6, 6}, rng), 2};
  const Qkv qkv = project_qkv(t, w);
  ASSERT_EQ(qkv.k.shape(), (Shape{1, 2, 4, 3}));
  for (auto [out, weight] : {std::pair{&qkv.q, &w.w_q}, std::pair{&qkv.k, &w.w_k}, std::pair{&qkv.v, &w.w_v}})
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t c = 0; c < 6; ++c) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < 6; ++j) acc += double(t.at(0, i, j)) * weight->at(j, c);
        EXPECT_NEAR(out->at(0, c / 3, i, c % 3), acc, 1e-5);
      }
}

TEST(ExactAttention, SingleTokenReturnsValue) {
  Rng rng(4);
  const Tensor q = Tensor::randn({1, 1, 1, 4}, rng), k = Tensor::randn({1, 1, 1, 4}, rng),
               v = Tensor::randn({1, 1, 1, 4}, rng);
  const AttentionOutput a = exact_attention(q, k, v, true);
  EXPECT_EQ(a.out.values(), v.values());
  ASSERT_TRUE(a.record.has_value());
  EXPECT_EQ(a.record->att.values(), std::vector<float>{1.0F});
}

TEST(ExactAttention, ZeroKeysGiveUniformWeights) {
  Rng rng(5);
  const Tensor q = Tensor::randn({1, 1, 5, 3}, rng), v = Tensor::randn({1, 1, 5, 3}, rng);
  const AttentionOutput a = exact_attention(q, Tensor::zeros({1, 1, 5, 3}), v, true);
  for (float x : a.record->att.values()) EXPECT_NEAR(x, 0.2F, 1e-7);
  for (std::int64_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) mean += v.at(0, 0, j, c) / 5.0;
    for (std::int64_t i = 0; i < 5; ++i) EXPECT_NEAR(a.out.at(0, 0, i, c), mean, 1e-6);
  }
}

TEST(ExactAttention, MatchesBruteForceOracle) {
  Rng rng(6);
  const Tensor q = Tensor::randn({1, 1, 3, 2}, rng), k = Tensor::randn({1, 1, 3, 2}, rng),
               v = Tensor::randn({1, 1, 3, 2}, rng);
  const AttentionOutput a = exact_attention(q, k, v);
  EXPECT_FALSE(a.record.has_value());
  const auto ref = dense_attention(q, k, v);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(a.out[i], ref[i], 1e-6);
  // Larger multi-head case, float accumulation.
  const Tensor q2 = Tensor::randn({2, 3, 17, 5}, rng), k2 = Tensor::randn({2, 3, 17, 5}, rng),
               v2 = Tensor::randn({2, 3, 17, 5}, rng);
  const auto ref2 = dense_attention(q2, k2, v2);
  const Tensor out2 = exact_attention(q2, k2, v2).out;
  for (std::size_t i = 0; i < ref2.size(); ++i) EXPECT_NEAR(out2[i], ref2[i], 1e-5);
}

TEST(ExactAttention, RowsAreProbabilityDistributions) {
  Rng rng(7);
  const Tensor q = Tensor::randn({2, 2, 33, 8}, rng, 3.0F), k = Tensor::randn({2, 2, 33, 8}, rng, 3.0F);
  const Tensor att = exact_attention(q, k, Tensor::randn({2, 2, 33, 8}, rng), true).record->att;
  ASSERT_EQ(att.shape(), (Shape{2, 2, 33, 33}));
  for (std::int64_t r = 0; r < 2 * 2 * 33; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 33; ++j) {
      const float x = att[static_cast<std::size_t>(r * 33 + j)];
      EXPECT_GE(x, 0.0F);
      EXPECT_LE(x, 1.0F);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(ExactAttention, TokenPermutationEquivariance) {
  Rng rng(8);
  const std::int64_t n = 11, d = 4;
  const Tensor t = Tensor::randn({1, n, d}, rng);
  AttentionWeights w{Tensor::randn({d, d}, rng), Tensor::randn({d, d}, rng), Tensor::randn({d, d}, rng),
                     Tensor::eye(d), 1};
  std::vector<std::int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937(3));
  Tensor tp(t.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < d; ++c) tp.at(0, i, c) = t.at(0, perm[i], c);
  const Qkv a = project_qkv(t, w), b = project_qkv(tp, w);
  const Tensor oa = exact_attention(a.q, a.k, a.v).out, ob = exact_attention(b.q, b.k, b.v).out;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < d; ++c) EXPECT_NEAR(ob.at(0, 0, i, c), oa.at(0, 0, perm[i], c), 1e-5);
}

TEST(ExactAttention, MismatchedShapesThrow) {
  EXPECT_THROW(exact_attention(Tensor({1, 1, 3, 2}), Tensor({1, 1, 4, 2}), Tensor({1, 1, 4, 2})), ShapeError);
  EXPECT_THROW(exact_attention(Tensor({1, 1, 3, 2}), Tensor({1, 1, 3, 3}), Tensor({1, 1, 3, 2})), ShapeError);
}

TEST(Performer, SingleTokenReturnsValue) {
  Rng rng(9);
  const Tensor q = Tensor::randn({1, 1, 1, 16}, rng), k = Tensor::randn({1, 1, 1, 16}, rng),
               v = Tensor::randn({1, 1, 1, 16}, rng);
  const Tensor out = performer_attention(q, k, v, PerformerSpec{8, 1});
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out[i], v[i], 1e-6 * std::max(1.0F, std::abs(v[i])));
}

TEST(Performer, ErrorShrinksWithFeatureCount) {
  Rng rng(10);
  const Tensor q = Tensor::randn({1, 1, 64, 16}, rng, 0.5F), k = Tensor::randn({1, 1, 64, 16}, rng, 0.5F),
               v = Tensor::randn({1, 1, 64, 16}, rng);
  const Tensor exact = exact_attention(q, k, v).out;
  std::vector<double> medians;
  for (int m : {8, 32, 128, 512}) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 9; ++seed)
      errs.push_back(relative_error(performer_attention(q, k, v, PerformerSpec{m, seed}), exact));
    medians.push_back(median(errs));
  }
  for (std::size_t i = 1; i < medians.size(); ++i) EXPECT_LT(medians[i], medians[i - 1]) << "m index " << i;
  // Measured on this fixture: about 0.05 at m=512.
  EXPECT_LT(medians.back(), 0.15);
}

TEST(Performer, FixedSeedIsBitReproducible) {
  Rng rng(11);
  const Tensor q = Tensor::randn({2, 2, 20, 8}, rng), k = Tensor::randn({2, 2, 20, 8}, rng),
               v = Tensor::randn({2, 2, 20, 8}, rng);
  const PerformerSpec spec{32, 77};
  EXPECT_EQ(performer_attention(q, k, v, spec).values(), performer_attention(q, k, v, spec).values());
  EXPECT_NE(performer_attention(q, k, v, spec).values(), performer_attention(q, k, v, PerformerSpec{32, 78}).values());
}

TEST(Performer, RejectsZeroFeatures) {
  EXPECT_THROW(performer_attention(Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 2}), PerformerSpec{0, 1}),
               ContractError);
}

TEST(Performer, DenominatorUnderflowIsClampedAndCounted) {
  // Two opposed features: each query peaks on the feature where the keys
  // are smallest, so the normalizer underflows in float.
  const Tensor proj(Shape{2, 2}, std::vector<float>{1.0F, -1.0F, 0.0F, 0.0F});
  const Tensor q(Shape{1, 1, 2, 2}, std::vector<float>{100, 0, 100, 0});
  const Tensor k(Shape{1, 1, 2, 2}, std::vector<float>{-100, 0, -100, 0});
  const Tensor v = Tensor::full({1, 1, 2, 2}, 1.0F);
  const auto before = denominator_clamp_counter().load();
  const Tensor out = performer_attention(q, k, v, proj);
  for (float x : out.values()) EXPECT_TRUE(std::isfinite(x));
  EXPECT_GT(denominator_clamp_counter().load(), before);
}

TEST(TransformerBlock, ZeroBranchesArePureResidual) {
  Rng rng(12);
  for (BlockOrder order : {BlockOrder::kPaper, BlockOrder::kPreNorm}) {
    BlockShape s;
    s.dim = 8;
    s.order = order;
    TransformerBlockWeights w = create_block_weights(s, [](const std::string&, const Shape& shape, Init init) {
      return init == Init::kOnes ? Tensor::full(shape, 1.0F) : Tensor::zeros(shape);
    });
    const Tensor t = Tensor::randn({2, 9, 8}, rng);
    EXPECT_EQ(transformer_block(t, w).out.values(), t.values());
  }
}

TEST(TransformerBlock, PreservesShapeAtPaperTokenCounts) {
  Rng rng(13);
  BlockShape s;
  s.mode = AttentionMode::kPerformer;
  const TransformerBlockWeights w = make_block(s, rng, 0.02F);
  for (std::int64_t n : {529, 625, 841}) {
    const Tensor t = Tensor::randn({1, n, 64}, rng);
    EXPECT_EQ(transformer_block(t, w).out.shape(), t.shape());
  }
}

TEST(TransformerBlock, ExactAndPerformerAgreeAtLargeFeatureCount) {
  // Default dims and the model's init scale.
  Rng rng(14);
  BlockShape s;
  s.mode = AttentionMode::kPerformer;
  s.performer = PerformerSpec{512, 5};
  TransformerBlockWeights perf = make_block(s, rng, 0.02F);
  TransformerBlockWeights exact = perf;
  exact.mode = AttentionMode::kExact;
  const Tensor t = Tensor::randn({1, 529, 64}, rng);
  EXPECT_LT(relative_error(transformer_block(t, perf).out, transformer_block(t, exact).out), 0.2);
  // The attention branch alone, without the residual; measured about 0.055.
  EXPECT_LT(relative_error(multi_head_attention(t, perf, false).out, multi_head_attention(t, exact, false).out), 0.2);
}

TEST(TransformerBlock, CaptureRecordsAttention) {
  Rng rng(15);
  for (AttentionMode mode : {AttentionMode::kExact, AttentionMode::kPerformer}) {
    BlockShape s;
    s.dim = 8;
    s.heads = 2;
    s.mode = mode;
    const TransformerBlockWeights w = make_block(s, rng);
    const BlockOutput out = transformer_block(Tensor::randn({2, 9, 8}, rng), w, true);
    ASSERT_TRUE(out.record.has_value());
    EXPECT_EQ(out.record->att.shape(), (Shape{2, 2, 9, 9}));
    EXPECT_FALSE(transformer_block(Tensor::randn({2, 9, 8}, rng), w, false).record.has_value());
  }
}

TEST(TransformerBlock, GradCheck) {
  Rng rng(16);
  for (AttentionMode mode : {AttentionMode::kExact, AttentionMode::kPerformer}) {
    for (BlockOrder order : {BlockOrder::kPaper, BlockOrder::kPreNorm}) {
      BlockShape s;
      s.dim = 8;
      s.mode = mode;
      s.order = order;
      s.performer = PerformerSpec{16, 3};
      TransformerBlockWeights w = make_block(s, rng, 0.3F);
      const Tensor t = Tensor::randn({1, 9, 8}, rng);
      GradCheckOptions opt;
      opt.tol = 2e-2F;
      const GradCheckResult r = grad_check([&](const Tensor& x) { return transformer_block(x, w).out; }, t, opt);
      EXPECT_TRUE(r.passed) << to_string(mode) << "/" << to_string(order) << ": " << r.max_error << " " << r.worst;
      // Parameter gradients; a wider step keeps float rounding out of the
      // finite differences.
      opt.step = 1e-2F;
      const Tensor probe = Tensor::randn({1, 9, 8}, rng);
      const GradCheckResult pr = grad_check([&]() { return sum(mul(transformer_block(t, w).out, probe)); },
                                            {w.attn.w_q, w.attn.w_v, w.ln1_gamma, w.mlp_out.fc1_w}, opt);
      EXPECT_TRUE(pr.passed) << to_string(mode) << "/" << to_string(order) << ": " << pr.max_error << " " << pr.worst;
    }
  }
}

TEST(TransformerBlock, DimensionMismatchIsShapeError) {
  Rng rng(17);
  BlockShape s;
  s.dim = 8;
  const TransformerBlockWeights w = make_block(s, rng);
  EXPECT_THROW(transformer_block(Tensor({1, 9, 7}), w), ShapeError);
  EXPECT_THROW(transformer_block(Tensor({9, 8}), w), ShapeError);
}

TEST(TransformerBlock, HeadsMustDivideDim) {
  Rng rng(18);
  BlockShape s;
  s.dim = 8;
  s.heads = 3;
  EXPECT_THROW(make_block(s, rng), ConfigError);
}

}  // namespace
}  // namespace ctformer

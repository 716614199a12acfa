// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ctformer/grad_check.hpp"
#include "ctformer/ops.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {
namespace {

Tensor make(const Shape& s, std::vector<float> v) { return Tensor(s, std::move(v)); }

// Triple-loop reference product for 2-D operands.
std::vector<float> naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(static_cast<std::size_t>(m * n), 0.0F);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += static_cast<double>(a.at(i, t)) * b.at(t, j);
      out[static_cast<std::size_t>(i * n + j)] = static_cast<float>(acc);
    }
  return out;
}

TEST(Matmul, IdentityLeavesOperand) {
  const Tensor x = make({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(Tensor::eye(2), x).values(), x.values());
}

TEST(Matmul, HandArithmetic) {
  const Tensor c = matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(c.values(), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, RowTimesColumnOfOnes) {
  const Tensor c = matmul(Tensor::full({1, 3}, 1.0F), Tensor::full({3, 1}, 1.0F));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(c.item(), 3.0F);
}

TEST(Matmul, MatchesNaiveOracleOnRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = rng.range(1, 9), k = rng.range(1, 9), n = rng.range(1, 9);
    const Tensor a = Tensor::randn({m, k}, rng), b = Tensor::randn({k, n}, rng);
    const Tensor c = matmul(a, b);
    const auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-5);
  }
}

TEST(Matmul, BroadcastsBatchDims) {
  Rng rng(4);
  const Tensor a = Tensor::randn({2, 3, 4, 5}, rng);
  const Tensor b = Tensor::randn({1, 3, 5, 2}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 4, 2}));
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t h = 0; h < 3; ++h)
      for (std::int64_t r = 0; r < 4; ++r)
        for (std::int64_t col = 0; col < 2; ++col) {
          double acc = 0.0;
          for (std::int64_t t = 0; t < 5; ++t) acc += a.at(i, h, r, t) * b.at(0, h, t, col);
          EXPECT_NEAR(c.at(i, h, r, col), acc, 1e-5);
        }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityIsBitwiseClose) {
  Rng rng(5);
  const Tensor x = Tensor::randn({6, 6}, rng);
  const Tensor y = matmul(Tensor::eye(6), x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(Softmax, Examples) {
  const Tensor a = softmax_lastdim(make({2}, {0, 0}), 1.0F);
  EXPECT_NEAR(a[0], 0.5, 1e-7);
  EXPECT_NEAR(a[1], 0.5, 1e-7);
  const Tensor b = softmax_lastdim(make({2}, {0, std::log(3.0F)}), 1.0F);
  EXPECT_NEAR(b[0], 0.25, 1e-6);
  EXPECT_NEAR(b[1], 0.75, 1e-6);
  const Tensor c = softmax_lastdim(make({3}, {1000, 1000, 1000}), 1.0F);
  for (float v : c.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-6);
}

TEST(Softmax, RowsSumToOneInUnitInterval) {
  Rng rng(6);
  const Tensor t = Tensor::randn({3, 7, 11}, rng, 5.0F);
  const Tensor s = softmax_lastdim(t, 0.7F);
  for (std::int64_t r = 0; r < 21; ++r) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 11; ++j) {
      const float v = s[static_cast<std::size_t>(r * 11 + j)];
      EXPECT_GE(v, 0.0F);
      EXPECT_LE(v, 1.0F);
      acc += v;
    }
    EXPECT_NEAR(acc, 1.0, 1e-5);
  }
}

TEST(Softmax, RejectsNonPositiveScale) {
  EXPECT_THROW(softmax_lastdim(Tensor({2}), 0.0F), ContractError);
}

TEST(LayerNorm, Examples) {
  const Tensor ones = Tensor::full({4}, 1.0F), zeros = Tensor::zeros({4});
  const Tensor a = layer_norm(Tensor::full({2, 4}, 3.0F), ones, zeros, 1e-5F);
  for (float v : a.data()) EXPECT_EQ(v, 0.0F);

  const Tensor b = layer_norm(make({2}, {1, 3}), Tensor::full({2}, 1.0F), Tensor::zeros({2}), 1e-12F);
  EXPECT_NEAR(b[0], -1.0, 1e-5);
  EXPECT_NEAR(b[1], 1.0, 1e-5);

  Rng rng(7);
  const Tensor c = layer_norm(Tensor::randn({3, 4}, rng), zeros, Tensor::full({4}, 5.0F), 1e-5F);
  for (float v : c.data()) EXPECT_FLOAT_EQ(v, 5.0F);
}

TEST(Linear, Examples) {
  Rng rng(8);
  const Tensor x = Tensor::randn({2, 3}, rng);
  EXPECT_EQ(linear(x, Tensor::eye(3), Tensor::zeros({3})).values(), x.values());
  EXPECT_FLOAT_EQ(linear(make({1, 2}, {1, 1}), make({2, 1}, {1, 1}), make({1}, {1})).item(), 3.0F);
  const Tensor b = Tensor::randn({4}, rng);
  const Tensor y = linear(Tensor::zeros({5, 3}), Tensor::randn({3, 4}, rng), b);
  for (std::int64_t r = 0; r < 5; ++r)
    for (std::int64_t j = 0; j < 4; ++j) EXPECT_EQ(y.at(r, j), b[static_cast<std::size_t>(j)]);
}

TEST(Linear, ShapeMismatchThrows) {
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({4, 5}), Tensor({5})), ShapeError);
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({3, 5}), Tensor({4})), ShapeError);
}

TEST(Gelu, Examples) {
  const Tensor g = gelu(make({3}, {0.0F, 10.0F, 1.0F}));
  EXPECT_EQ(g[0], 0.0F);
  EXPECT_NEAR(g[1], 10.0, 1e-4);
  // 0.5 (1 + tanh(sqrt(2/pi) (1 + 0.044715)))
  const double expect = 0.5 * (1.0 + std::tanh(std::sqrt(2.0 / 3.141592653589793) * 1.044715));
  EXPECT_NEAR(g[2], expect, 1e-6);
  EXPECT_NEAR(g[2], 0.8412, 1e-4);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(9);
  Tensor p = Tensor::randn({2, 3, 4}, rng);
  p.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  tape.backward(sum(p));
  for (float g : p.grad()) EXPECT_EQ(g, 1.0F);
}

TEST(Backward, HalfSumOfSquares) {
  Tensor p = make({2}, {1, 2});
  p.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  tape.backward(scale(sum(square(p)), 0.5F));
  EXPECT_FLOAT_EQ(p.grad()[0], 1.0F);
  EXPECT_FLOAT_EQ(p.grad()[1], 2.0F);
}

TEST(Backward, AccumulatesUntilZeroed) {
  Tensor p = make({2}, {1, 2});
  p.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor loss = scale(sum(square(p)), 0.5F);
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_FLOAT_EQ(p.grad()[0], 2.0F);
  EXPECT_FLOAT_EQ(p.grad()[1], 4.0F);
  p.zero_grad();
  tape.backward(loss);
  EXPECT_FLOAT_EQ(p.grad()[1], 2.0F);
}

TEST(Backward, NonScalarIsContractError) {
  Tensor p = Tensor::full({3}, 1.0F);
  p.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = square(p);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, EmptyTapeIsContractError) {
  Tape tape;
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0F)), ContractError);
  EXPECT_THROW(backward(Tensor::scalar(1.0F)), ContractError);  // no active tape
}

TEST(Backward, DisconnectedParameterKeepsZeroGrad) {
  Tensor used = Tensor::full({3}, 2.0F), unused = Tensor::full({3}, 1.0F);
  used.set_requires_grad();
  unused.set_requires_grad();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor noise = square(unused);  // recorded but not part of the loss
  tape.backward(sum(square(used)));
  for (float g : unused.grad()) EXPECT_EQ(g, 0.0F);
  for (float g : used.grad()) EXPECT_EQ(g, 4.0F);
  (void)noise;
}

TEST(Tape, InactiveTapeRecordsNothing) {
  Tensor p = Tensor::full({2}, 1.0F);
  p.set_requires_grad();
  Tape tape;
  {
    Tape::Scope scope(tape);
    {
      Tape::Pause pause;
      (void)square(p);
    }
    EXPECT_EQ(tape.size(), 0U);
    (void)square(p);
  }
  EXPECT_EQ(tape.size(), 1U);
  (void)square(p);  // after the scope ends
  EXPECT_EQ(tape.size(), 1U);
}

TEST(Tape, ConstantsAreNotRecorded) {
  Tape tape;
  Tape::Scope scope(tape);
  (void)add(Tensor::full({2}, 1.0F), Tensor::full({2}, 2.0F));
  EXPECT_TRUE(tape.empty());
}

TEST(Tensor, CopiesAliasAndCloneDeepCopies) {
  Tensor a = Tensor::full({2}, 1.0F);
  Tensor alias = a;
  Tensor deep = a.clone();
  alias[0] = 7.0F;
  EXPECT_EQ(a[0], 7.0F);
  EXPECT_EQ(deep[0], 1.0F);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1}), ShapeError);
}

TEST(Tensor, FiniteForwardOnFiniteInput) {
  Rng rng(10);
  const Tensor x = Tensor::randn({4, 8}, rng, 30.0F);
  EXPECT_TRUE(softmax_lastdim(x, 1.0F).all_finite());
  EXPECT_TRUE(gelu(x).all_finite());
  EXPECT_TRUE(layer_norm(x, Tensor::full({8}, 1.0F), Tensor::zeros({8})).all_finite());
}

// ---------------------------------------------------------------------------
// Gradient checks: every differentiable op on five seeded inputs.

struct OpCase {
  const char* name;
  Shape shape;
  std::function<Tensor(const Tensor&)> fn;
  float tol = 1e-2F;
};

std::vector<OpCase> op_cases() {
  Rng rng(11);
  const Tensor w = Tensor::randn({5, 3}, rng), b = Tensor::randn({3}, rng);
  const Tensor other = Tensor::randn({4, 5}, rng), row = Tensor::randn({5}, rng);
  const Tensor positive = Tensor::uniform({4, 5}, rng, 0.5F, 2.0F);
  const Tensor gamma = Tensor::randn({5}, rng), beta = Tensor::randn({5}, rng);
  const Tensor right = Tensor::randn({5, 2}, rng);
  return {
      {"add", {4, 5}, [=](const Tensor& x) { return add(x, other); }},
      {"add_broadcast", {4, 5}, [=](const Tensor& x) { return add(x, row); }},
      {"sub", {4, 5}, [=](const Tensor& x) { return sub(other, x); }},
      {"mul", {4, 5}, [=](const Tensor& x) { return mul(x, other); }},
      {"mul_self", {4, 5}, [=](const Tensor& x) { return mul(x, x); }},
      {"div", {4, 5}, [=](const Tensor& x) { return div(x, positive); }},
      {"div_denominator", {4, 5}, [=](const Tensor& x) { return div(other, add(square(x), positive)); }},
      {"scale", {4, 5}, [=](const Tensor& x) { return scale(x, -1.5F); }},
      {"exp", {4, 5}, [=](const Tensor& x) { return exp(scale(x, 0.5F)); }},
      {"square", {4, 5}, [=](const Tensor& x) { return square(x); }},
      {"gelu", {4, 5}, [=](const Tensor& x) { return gelu(x); }},
      {"clamp_min", {4, 5}, [=](const Tensor& x) { return clamp_min(x, -0.3F); }},
      {"sum", {4, 5}, [=](const Tensor& x) { return sum(x); }},
      {"mean", {4, 5}, [=](const Tensor& x) { return mean(x); }},
      {"sum_dim", {3, 4, 5}, [=](const Tensor& x) { return sum_dim(x, 1); }},
      {"reshape", {4, 5}, [=](const Tensor& x) { return mul(reshape(x, {2, 10}), reshape(other, {2, 10})); }},
      {"permute", {2, 3, 4}, [=](const Tensor& x) { return permute(x, {2, 0, 1}); }},
      {"transpose_last2", {2, 3, 4}, [=](const Tensor& x) { return transpose_last2(x); }},
      {"matmul_left", {4, 5}, [=](const Tensor& x) { return matmul(x, right); }},
      {"matmul_right", {5, 2}, [=](const Tensor& x) { return matmul(other, x); }},
      {"matmul_batched", {2, 4, 5}, [=](const Tensor& x) { return matmul(x, transpose_last2(x)); }},
      {"linear", {4, 5}, [=](const Tensor& x) { return linear(x, w, b); }},
      {"softmax", {4, 5}, [=](const Tensor& x) { return softmax_lastdim(x, 0.8F); }},
      {"layer_norm", {4, 5}, [=](const Tensor& x) { return layer_norm(x, gamma, beta, 1e-5F); }},
  };
}

TEST(GradCheck, EveryOpOnFiveSeeds) {
  for (const OpCase& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(100 + seed);
      Tensor x = Tensor::randn(c.shape, rng);
      // Keep clamp_min inputs away from the kink.
      if (std::string(c.name) == "clamp_min") {
        for (float& v : x.data()) {
          if (std::abs(v + 0.3F) < 0.01F) v += 0.05F;
        }
      }
      GradCheckOptions opt;
      opt.tol = c.tol;
      opt.seed = seed;
      const GradCheckResult r = grad_check(c.fn, x, opt);
      EXPECT_TRUE(r.passed) << c.name << " seed " << seed << ": " << r.max_error << " (" << r.worst << ")";
    }
  }
}

TEST(GradCheck, LinearParametersAndSoftmaxBoolOverload) {
  Rng rng(12);
  Tensor x = Tensor::randn({3, 4}, rng), w = Tensor::randn({4, 2}, rng), b = Tensor::randn({2}, rng);
  const Tensor probe = Tensor::randn({3, 2}, rng);
  const GradCheckResult r = grad_check([&] { return sum(mul(linear(x, w, b), probe)); }, {x, w, b});
  EXPECT_TRUE(r.passed) << r.worst;
  EXPECT_TRUE(grad_check([](const Tensor& t) { return softmax_lastdim(t, 1.0F); }, Tensor::randn({3, 4}, rng), 1e-2F));
}

// An op whose recorded adjoint is deliberately wrong (factor 2 too large).
Tensor wrong_square(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * t[i];
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out]() {
      auto g = out.grad_for_accumulate();
      auto gt = t.grad_for_accumulate();
      for (std::size_t i = 0; i < t.size(); ++i) gt[i] += 4.0F * t[i] * g[i];
    });
  }
  return out;
}

TEST(GradCheck, WrongAdjointFails) {
  Rng rng(13);
  EXPECT_FALSE(grad_check(wrong_square, Tensor::randn({3, 3}, rng), 1e-2F));
  EXPECT_TRUE(grad_check([](const Tensor& t) { return square(t); }, Tensor::randn({3, 3}, rng), 1e-2F));
}

TEST(ClampMin, CountsClampedEntries) {
  std::atomic<std::uint64_t> counter{0};
  const Tensor y = clamp_min(make({4}, {-1, 0.5F, -2, 3}), 0.0F, &counter);
  EXPECT_EQ(y.values(), (std::vector<float>{0, 0.5F, 0, 3}));
  EXPECT_EQ(counter.load(), 2U);
}

}  // namespace
}  // namespace ctformer

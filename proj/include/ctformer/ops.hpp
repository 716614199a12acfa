// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations. Every function computes its forward
// value eagerly and, when a tape is active and an input requires a gradient,
// records a closure that accumulates the adjoint into its inputs.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

template <typename... Ts>
Tape* recording_tape(const Ts&... inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? tape : nullptr;
}

inline ConstMatrixMap cmap(const float* p, std::int64_t rows, std::int64_t cols) {
  return ConstMatrixMap(p, rows, cols);
}
inline MatrixMap mmap(float* p, std::int64_t rows, std::int64_t cols) { return MatrixMap(p, rows, cols); }

// Shapes padded on the left to rank 4.
inline std::array<std::int64_t, 4> pad4(const Shape& s) {
  std::array<std::int64_t, 4> d{1, 1, 1, 1};
  const std::size_t off = 4 - s.rank();
  for (std::size_t i = 0; i < s.rank(); ++i) d[off + i] = s[i];
  return d;
}

inline std::array<std::int64_t, 4> strides4(const std::array<std::int64_t, 4>& d) {
  std::array<std::int64_t, 4> st{};
  std::int64_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= d[static_cast<std::size_t>(i)];
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.rank(), b.rank());
  std::array<std::int64_t, 4> out{};
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < a.rank() ? a.from_back(i) : 1;
    const std::int64_t db = i < b.rank() ? b.from_back(i) : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() + " are not broadcastable");
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return Shape(std::span<const std::int64_t>(out.data(), rank));
}

// Strides of `in` expressed in the 4-D index space of `out` (0 where broadcast).
inline std::array<std::int64_t, 4> broadcast_strides(const Shape& in, const Shape& out) {
  std::array<std::int64_t, 4> din = pad4(in);
  std::array<std::int64_t, 4> dout = pad4(out);
  std::array<std::int64_t, 4> st = strides4(din);
  for (std::size_t i = 0; i < 4; ++i) {
    if (din[i] == 1 && dout[i] != 1) st[i] = 0;
  }
  return st;
}

template <typename Fn>
void for_each_broadcast(const Shape& out, const std::array<std::int64_t, 4>& sa, const std::array<std::int64_t, 4>& sb,
                        Fn&& fn) {
  const auto d = pad4(out);
  std::int64_t o = 0;
  for (std::int64_t i0 = 0; i0 < d[0]; ++i0) {
    for (std::int64_t i1 = 0; i1 < d[1]; ++i1) {
      for (std::int64_t i2 = 0; i2 < d[2]; ++i2) {
        const std::int64_t base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        const std::int64_t base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (std::int64_t i3 = 0; i3 < d[3]; ++i3, ++o) {
          fn(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
        }
      }
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
  Tensor out(out_shape);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  auto apply = [kind](float x, float y) {
    switch (kind) {
      case BinaryKind::kAdd: return x + y;
      case BinaryKind::kSub: return x - y;
      case BinaryKind::kMul: return x * y;
      case BinaryKind::kDiv: return x / y;
    }
    return 0.0F;
  };
  const bool same = a.shape() == b.shape();
  if (same) {
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      po[o] = apply(pa[ia], pb[ib]);
    });
  }
  if (Tape* tape = recording_tape(a, b)) {
    tape->record(out, [a, b, out, kind, same]() mutable {
      const float* g = out.grad().data();
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      float* ga = need_a ? a.grad_for_accumulate().data() : nullptr;
      float* gb = need_b ? b.grad_for_accumulate().data() : nullptr;
      const float* va = a.data().data();
      const float* vb = b.data().data();
      auto step = [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        const float go = g[o];
        switch (kind) {
          case BinaryKind::kAdd:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] += go;
            break;
          case BinaryKind::kSub:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] -= go;
            break;
          case BinaryKind::kMul:
            if (ga) ga[ia] += go * vb[ib];
            if (gb) gb[ib] += go * va[ia];
            break;
          case BinaryKind::kDiv:
            if (ga) ga[ia] += go / vb[ib];
            if (gb) gb[ib] -= go * va[ia] / (vb[ib] * vb[ib]);
            break;
        }
      };
      if (same) {
        const auto n = static_cast<std::int64_t>(out.size());
        for (std::int64_t i = 0; i < n; ++i) step(i, i, i);
      } else {
        for_each_broadcast(out.shape(), broadcast_strides(a.shape(), out.shape()),
                           broadcast_strides(b.shape(), out.shape()), step);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& t, Fwd fwd, Deriv deriv) {
  Tensor out(t.shape());
  const float* pt = t.data().data();
  float* po = out.data().data();
  const std::size_t n = t.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pt[i]);
  if (Tape* tape = recording_tape(t)) {
    tape->record(out, [t, out, deriv]() mutable {
      const float* g = out.grad().data();
      const float* x = t.data().data();
      const float* y = out.data().data();
      float* gt = t.grad_for_accumulate().data();
      const std::size_t n = t.size();
      for (std::size_t i = 0; i < n; ++i) gt[i] += g[i] * deriv(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace detail

/// Counts how often performer denominators were clamped (diagnostic).
inline std::atomic<std::uint64_t>& denominator_clamp_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::kAdd, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::kSub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::kMul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::kDiv, "div"); }

inline Tensor scale(const Tensor& t, float s) {
  return detail::unary(t, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

inline Tensor exp(const Tensor& t) {
  return detail::unary(t, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

inline Tensor square(const Tensor& t) {
  return detail::unary(t, [](float x) { return x * x; }, [](float x, float) { return 2.0F * x; });
}

namespace gelu_constants {
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr float kSqrt2OverPi = 0.7978845608028654F;
inline constexpr float kCubic = 0.044715F;
}  // namespace gelu_constants

inline Tensor gelu(const Tensor& t) {
  using namespace gelu_constants;
  auto fwd = [](float x) {
    const float u = kSqrt2OverPi * (x + kCubic * x * x * x);
    return 0.5F * x * (1.0F + std::tanh(u));
  };
  auto deriv = [](float x, float) {
    const float u = kSqrt2OverPi * (x + kCubic * x * x * x);
    const float th = std::tanh(u);
    return 0.5F * (1.0F + th) + 0.5F * x * (1.0F - th * th) * kSqrt2OverPi * (1.0F + 3.0F * kCubic * x * x);
  };
  return detail::unary(t, fwd, deriv);
}

/// max(t, lo). Clamped entries pass no gradient and bump `counter` if given.
inline Tensor clamp_min(const Tensor& t, float lo, std::atomic<std::uint64_t>* counter = nullptr) {
  if (counter != nullptr) {
    std::uint64_t n = 0;
    for (float v : t.data()) n += (v < lo) ? 1 : 0;
    if (n) counter->fetch_add(n, std::memory_order_relaxed);
  }
  return detail::unary(t, [lo](float x) { return x < lo ? lo : x; },
                       [lo](float x, float) { return x < lo ? 0.0F : 1.0F; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (float v : t.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out]() mutable {
      const float g = out.grad()[0];
      for (float& v : t.grad_for_accumulate()) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& t) { return scale(sum(t), 1.0F / static_cast<float>(std::max<std::size_t>(1, t.size()))); }

/// Sum over one dimension, keeping it with extent 1.
inline Tensor sum_dim(const Tensor& t, std::size_t dim) {
  if (dim >= t.rank()) throw ShapeError("sum_dim: dimension out of range for " + t.shape().str());
  std::array<std::int64_t, 4> d{};
  for (std::size_t i = 0; i < t.rank(); ++i) d[i] = t.dim(i);
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= d[i];
  for (std::size_t i = dim + 1; i < t.rank(); ++i) inner *= d[i];
  const std::int64_t extent = d[dim];
  d[dim] = 1;
  Tensor out(Shape(std::span<const std::int64_t>(d.data(), t.rank())));
  const float* pt = t.data().data();
  float* po = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t e = 0; e < extent; ++e) {
      const float* row = pt + (o * extent + e) * inner;
      float* dst = po + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  }
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out, outer, extent, inner]() mutable {
      const float* g = out.grad().data();
      float* gt = t.grad_for_accumulate().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t e = 0; e < extent; ++e) {
          float* row = gt + (o * extent + e) * inner;
          const float* src = g + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) row[i] += src[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& t, const Shape& shape) {
  if (shape.numel() != t.numel()) {
    throw ShapeError("reshape: cannot view " + t.shape().str() + " as " + shape.str());
  }
  Tensor out(shape, t.values());
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out]() mutable {
      const auto g = out.grad();
      auto gt = t.grad_for_accumulate();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    });
  }
  return out;
}

/// Generalized transpose: output dimension i is input dimension perm[i].
inline Tensor permute(const Tensor& t, std::span<const std::size_t> perm) {
  const std::size_t r = t.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank does not match " + t.shape().str());
  std::array<bool, 4> seen{};
  std::array<std::int64_t, 4> out_dims{1, 1, 1, 1};
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_dims[i] = t.dim(perm[i]);
  }
  Tensor out(Shape(std::span<const std::int64_t>(out_dims.data(), r)));
  // Input strides for each output axis, padded to 4-D.
  std::array<std::int64_t, 4> in_stride_full{};
  {
    std::int64_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      in_stride_full[i] = acc;
      acc *= t.dim(i);
    }
  }
  std::array<std::int64_t, 4> d{1, 1, 1, 1};
  std::array<std::int64_t, 4> st{0, 0, 0, 0};
  for (std::size_t i = 0; i < r; ++i) {
    d[4 - r + i] = out_dims[i];
    st[4 - r + i] = in_stride_full[perm[i]];
  }
  auto gather = [d, st](const float* src, float* dst, bool scatter_add) {
    std::int64_t o = 0;
    for (std::int64_t i0 = 0; i0 < d[0]; ++i0)
      for (std::int64_t i1 = 0; i1 < d[1]; ++i1)
        for (std::int64_t i2 = 0; i2 < d[2]; ++i2) {
          const std::int64_t base = i0 * st[0] + i1 * st[1] + i2 * st[2];
          for (std::int64_t i3 = 0; i3 < d[3]; ++i3, ++o) {
            if (scatter_add) {
              dst[base + i3 * st[3]] += src[o];
            } else {
              dst[o] = src[base + i3 * st[3]];
            }
          }
        }
  };
  gather(t.data().data(), out.data().data(), false);
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out, gather]() mutable { gather(out.grad().data(), t.grad_for_accumulate().data(), true); });
  }
  return out;
}

inline Tensor permute(const Tensor& t, std::initializer_list<std::size_t> perm) {
  return permute(t, std::span<const std::size_t>(perm.begin(), perm.size()));
}

/// Swap the last two dimensions.
inline Tensor transpose_last2(const Tensor& t) {
  if (t.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + t.shape().str());
  std::array<std::size_t, 4> perm{0, 1, 2, 3};
  const std::size_t r = t.rank();
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(t, std::span<const std::size_t>(perm.data(), r));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product. Leading batch dims broadcast (equal or 1).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + a.shape().str() + " and " + b.shape().str());
  }
  const std::int64_t m = a.shape().from_back(1);
  const std::int64_t k = a.shape().from_back(0);
  const std::int64_t k2 = b.shape().from_back(1);
  const std::int64_t n = b.shape().from_back(0);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ for " + a.shape().str() + " x " + b.shape().str());
  }
  const std::vector<std::int64_t> a_batch(a.shape().dims().begin(), a.shape().dims().end() - 2);
  const std::vector<std::int64_t> b_batch(b.shape().dims().begin(), b.shape().dims().end() - 2);
  const Shape out_batch = detail::broadcast_shape(Shape(std::span<const std::int64_t>(a_batch)),
                                                  Shape(std::span<const std::int64_t>(b_batch)), "matmul");
  std::vector<std::int64_t> out_dims(out_batch.dims().begin(), out_batch.dims().end());
  out_dims.push_back(m);
  out_dims.push_back(n);
  Tensor out{Shape(std::span<const std::int64_t>(out_dims))};

  const Shape a_bs{std::span<const std::int64_t>(a_batch)};
  const Shape b_bs{std::span<const std::int64_t>(b_batch)};
  const std::int64_t batches = out_batch.numel();
  // Per-batch matrix offsets for a and b.
  std::vector<std::int64_t> a_off(static_cast<std::size_t>(batches)), b_off(static_cast<std::size_t>(batches));
  {
    const auto sa = detail::broadcast_strides(a_bs, out_batch);
    const auto sb = detail::broadcast_strides(b_bs, out_batch);
    detail::for_each_broadcast(out_batch, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      a_off[static_cast<std::size_t>(o)] = ia * m * k;
      b_off[static_cast<std::size_t>(o)] = ib * k * n;
    });
  }
  const bool fold_a = b_bs.numel() == 1 && a_bs.numel() == batches;

  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  if (fold_a) {
    detail::mmap(po, batches * m, n).noalias() = detail::cmap(pa, batches * m, k) * detail::cmap(pb, k, n);
  } else {
    for (std::int64_t i = 0; i < batches; ++i) {
      detail::mmap(po + i * m * n, m, n).noalias() =
          detail::cmap(pa + a_off[static_cast<std::size_t>(i)], m, k) * detail::cmap(pb + b_off[static_cast<std::size_t>(i)], k, n);
    }
  }

  if (Tape* tape = detail::recording_tape(a, b)) {
    tape->record(out, [a, b, out, m, k, n, batches, fold_a, a_off = std::move(a_off), b_off = std::move(b_off)]() mutable {
      const float* g = out.grad().data();
      const float* va = a.data().data();
      const float* vb = b.data().data();
      if (fold_a) {
        if (a.requires_grad()) {
          detail::mmap(a.grad_for_accumulate().data(), batches * m, k).noalias() +=
              detail::cmap(g, batches * m, n) * detail::cmap(vb, k, n).transpose();
        }
        if (b.requires_grad()) {
          detail::mmap(b.grad_for_accumulate().data(), k, n).noalias() +=
              detail::cmap(va, batches * m, k).transpose() * detail::cmap(g, batches * m, n);
        }
        return;
      }
      float* ga = a.requires_grad() ? a.grad_for_accumulate().data() : nullptr;
      float* gb = b.requires_grad() ? b.grad_for_accumulate().data() : nullptr;
      for (std::int64_t i = 0; i < batches; ++i) {
        const auto gi = detail::cmap(g + i * m * n, m, n);
        const std::int64_t ao = a_off[static_cast<std::size_t>(i)];
        const std::int64_t bo = b_off[static_cast<std::size_t>(i)];
        if (ga) detail::mmap(ga + ao, m, k).noalias() += gi * detail::cmap(vb + bo, k, n).transpose();
        if (gb) detail::mmap(gb + bo, k, n).noalias() += detail::cmap(va + ao, m, k).transpose() * gi;
      }
    });
  }
  return out;
}

/// Affine map over the last dimension: t[..., d_in] * w[d_in, d_out] + b[d_out].
inline Tensor linear(const Tensor& t, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || b.rank() != 1 || t.rank() < 1) {
    throw ShapeError("linear: expected w rank 2 and b rank 1, got " + w.shape().str() + " and " + b.shape().str());
  }
  const std::int64_t din = t.shape().back();
  if (w.dim(0) != din || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear: input " + t.shape().str() + " does not fit weight " + w.shape().str() + " and bias " +
                     b.shape().str());
  }
  const std::int64_t dout = w.dim(1);
  const std::int64_t rows = t.numel() / std::max<std::int64_t>(din, 1);
  std::vector<std::int64_t> dims(t.shape().dims().begin(), t.shape().dims().end());
  dims.back() = dout;
  Tensor out{Shape(std::span<const std::int64_t>(dims))};
  auto y = detail::mmap(out.data().data(), rows, dout);
  y.noalias() = detail::cmap(t.data().data(), rows, din) * detail::cmap(w.data().data(), din, dout);
  y.rowwise() += detail::cmap(b.data().data(), 1, dout).row(0);
  if (Tape* tape = detail::recording_tape(t, w, b)) {
    tape->record(out, [t, w, b, out, rows, din, dout]() mutable {
      const auto g = detail::cmap(out.grad().data(), rows, dout);
      if (t.requires_grad()) {
        detail::mmap(t.grad_for_accumulate().data(), rows, din).noalias() +=
            g * detail::cmap(w.data().data(), din, dout).transpose();
      }
      if (w.requires_grad()) {
        detail::mmap(w.grad_for_accumulate().data(), din, dout).noalias() +=
            detail::cmap(t.data().data(), rows, din).transpose() * g;
      }
      if (b.requires_grad()) {
        // Plain row loop: Eigen's vectorized reductions peel by address, so
        // the rounding would depend on where the buffer was allocated.
        float* gb = b.grad_for_accumulate().data();
        const float* pg = out.grad().data();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < dout; ++c) gb[c] += pg[r * dout + c];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// softmax(scale * t) along the last dimension, max-subtracted for stability.
inline Tensor softmax_lastdim(const Tensor& t, float scale_factor = 1.0F) {
  if (!(scale_factor > 0.0F)) throw ContractError("softmax_lastdim: scale must be positive");
  const std::int64_t d = t.shape().back();
  const std::int64_t rows = t.numel() / std::max<std::int64_t>(d, 1);
  Tensor out(t.shape());
  const float* pt = t.data().data();
  float* po = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* x = pt + r * d;
    float* y = po + r * d;
    float mx = x[0];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(scale_factor * (x[j] - mx));
      total += y[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::int64_t j = 0; j < d; ++j) y[j] *= inv;
  }
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out, rows, d, scale_factor]() mutable {
      const float* g = out.grad().data();
      const float* y = out.data().data();
      float* gt = t.grad_for_accumulate().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* gr = g + r * d;
        const float* yr = y + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * yr[j];
        float* dst = gt + r * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += scale_factor * yr[j] * (gr[j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

/// Layer normalization over the last dimension followed by gamma * x + beta.
inline Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps = 1e-5F) {
  if (!(eps > 0.0F)) throw ContractError("layer_norm: eps must be positive");
  const std::int64_t d = t.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine parameters do not match last dimension of " + t.shape().str());
  }
  const std::int64_t rows = t.numel() / std::max<std::int64_t>(d, 1);
  Tensor out(t.shape());
  std::vector<float> xhat(t.size());
  std::vector<float> rstd(static_cast<std::size_t>(rows));
  const float* pt = t.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  float* po = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* x = pt + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[static_cast<std::size_t>(r)] = rs;
    float* xh = xhat.data() + r * d;
    float* y = po + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      xh[j] = static_cast<float>(x[j] - mu) * rs;
      y[j] = pg[j] * xh[j] + pb[j];
    }
  }
  if (Tape* tape = detail::recording_tape(t, gamma, beta)) {
    tape->record(out, [t, gamma, beta, out, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
      const float* g = out.grad().data();
      const float* pg = gamma.data().data();
      float* gg = gamma.requires_grad() ? gamma.grad_for_accumulate().data() : nullptr;
      float* gb = beta.requires_grad() ? beta.grad_for_accumulate().data() : nullptr;
      float* gt = t.requires_grad() ? t.grad_for_accumulate().data() : nullptr;
      std::vector<float> dxh(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* gr = g + r * d;
        const float* xh = xhat.data() + r * d;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          if (gg) gg[j] += gr[j] * xh[j];
          if (gb) gb[j] += gr[j];
          dxh[static_cast<std::size_t>(j)] = gr[j] * pg[j];
          mean_dxh += dxh[static_cast<std::size_t>(j)];
          mean_dxh_xh += dxh[static_cast<std::size_t>(j)] * xh[j];
        }
        if (!gt) continue;
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        const float rs = rstd[static_cast<std::size_t>(r)];
        float* dst = gt + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
          dst[j] += rs * static_cast<float>(dxh[static_cast<std::size_t>(j)] - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    });
  }
  return out;
}

}  // namespace ctformer

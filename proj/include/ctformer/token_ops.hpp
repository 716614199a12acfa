// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Token2Token algebra: token sequence <-> feature map reshaping, cyclic
// shift, dilated unfold and its overlap-add adjoint (fold), plus the token
// count and receptive field calculators. All maps are linear or
// permutations, so each backward is the exact transpose of its forward.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/ops.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

struct UnfoldSpec {
  std::array<int, 2> kernel{3, 3};
  int stride = 1;
  int dilation = 1;
  int padding = 0;

  int extent(std::size_t axis) const { return dilation * (kernel[axis] - 1) + 1; }
  int taps() const { return kernel[0] * kernel[1]; }

  static UnfoldSpec square(int k, int stride = 1, int dilation = 1, int padding = 0) {
    return UnfoldSpec{{k, k}, stride, dilation, padding};
  }
};

struct ShiftSpec {
  int shift = 0;
};

/// Placements along one axis: floor((spatial + 2p - d(K-1) - 1) / stride + 1).
inline std::int64_t token_count_1d(std::int64_t spatial, int kernel, int stride, int dilation, int padding = 0) {
  if (kernel < 1 || stride < 1 || dilation < 1 || padding < 0) {
    throw ShapeError("unfold spec needs positive kernel, stride, dilation and non-negative padding");
  }
  const std::int64_t span = spatial + 2 * static_cast<std::int64_t>(padding) -
                            static_cast<std::int64_t>(dilation) * (kernel - 1) - 1;
  if (span < 0) {
    throw ShapeError("kernel extent " + std::to_string(dilation * (kernel - 1) + 1) + " exceeds padded size " +
                     std::to_string(spatial + 2 * padding));
  }
  return span / stride + 1;
}

inline std::int64_t token_count(std::int64_t h, std::int64_t w, const UnfoldSpec& spec) {
  return token_count_1d(h, spec.kernel[0], spec.stride, spec.dilation, spec.padding) *
         token_count_1d(w, spec.kernel[1], spec.stride, spec.dilation, spec.padding);
}

/// Token count for a square map.
inline std::int64_t token_count(std::int64_t spatial, const UnfoldSpec& spec) {
  return token_count(spatial, spatial, spec);
}

/// Perceptive field as the product over axes of (2^(K_i + D_i) - 1).
/// Diagnostic only; shape arithmetic never uses it.
inline std::int64_t receptive_field(std::array<int, 2> kernel, std::array<int, 2> dilation) {
  std::int64_t p = 1;
  for (std::size_t i = 0; i < 2; ++i) {
    const int e = kernel[i] + dilation[i];
    if (e < 0 || e > 62) throw ContractError("receptive_field: exponent out of range");
    p *= (std::int64_t{1} << e) - 1;
  }
  return p;
}

inline std::int64_t receptive_field(const UnfoldSpec& spec) {
  return receptive_field(spec.kernel, {spec.dilation, spec.dilation});
}

/// Side of the square map holding n tokens; throws if n is not a square.
inline std::int64_t square_side(std::int64_t n) {
  auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ShapeError("token count " + std::to_string(n) + " is not a perfect square");
  return side;
}

/// [b, n, d] -> [b, d, h, w] with h = w = sqrt(n): transpose then reshape.
inline Tensor tokens_to_map(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("tokens_to_map expects [b, n, d], got " + t.shape().str());
  const std::int64_t b = t.dim(0), n = t.dim(1), d = t.dim(2);
  const std::int64_t side = square_side(n);
  return reshape(permute(t, {0, 2, 1}), Shape{b, d, side, side});
}

/// [b, d, h, w] -> [b, h*w, d]; exact inverse of tokens_to_map.
inline Tensor map_to_tokens(const Tensor& f) {
  if (f.rank() != 4) throw ShapeError("map_to_tokens expects [b, d, h, w], got " + f.shape().str());
  const std::int64_t b = f.dim(0), d = f.dim(1), h = f.dim(2), w = f.dim(3);
  return permute(reshape(f, Shape{b, d, h * w}), {0, 2, 1});
}

/// Rolls both spatial axes by `s.shift` with wraparound: the value at (i, j)
/// moves to ((i + s) mod h, (j + s) mod w).
inline Tensor cyclic_shift(const Tensor& f, ShiftSpec s) {
  if (f.rank() != 4) throw ShapeError("cyclic_shift expects [b, d, h, w], got " + f.shape().str());
  const std::int64_t planes = f.dim(0) * f.dim(1), h = f.dim(2), w = f.dim(3);
  if (std::abs(s.shift) >= std::min(h, w)) {
    throw ContractError("cyclic_shift: |shift| " + std::to_string(std::abs(s.shift)) + " must be below " +
                        std::to_string(std::min(h, w)));
  }
  const std::int64_t sh = ((s.shift % h) + h) % h;
  const std::int64_t sw = ((s.shift % w) + w) % w;
  Tensor out(f.shape());
  auto roll = [=](const float* src, float* dst, bool add) {
    for (std::int64_t p = 0; p < planes; ++p) {
      const float* sp = src + p * h * w;
      float* dp = dst + p * h * w;
      for (std::int64_t i = 0; i < h; ++i) {
        const std::int64_t oi = (i + sh) % h;
        for (std::int64_t j = 0; j < w; ++j) {
          const std::int64_t oj = (j + sw) % w;
          if (add) {
            dp[i * w + j] += sp[oi * w + oj];
          } else {
            dp[oi * w + oj] = sp[i * w + j];
          }
        }
      }
    }
  };
  roll(f.data().data(), out.data().data(), false);
  if (Tape* tape = detail::recording_tape(f)) {
    tape->record(out, [f, out, roll]() mutable { roll(out.grad().data(), f.grad_for_accumulate().data(), true); });
  }
  return out;
}

namespace detail {

struct UnfoldGeometry {
  std::int64_t batch, channels, h, w, oh, ow;
  UnfoldSpec spec;

  std::int64_t tokens() const { return oh * ow; }
  std::int64_t token_dim() const { return channels * spec.taps(); }

  // Visits every (token feature, pixel) incidence; pixel < 0 marks padding.
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const int k0 = spec.kernel[0], k1 = spec.kernel[1];
    const std::int64_t dim = token_dim();
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const std::int64_t tok = (b * oh + oy) * ow + ox;
          for (std::int64_t c = 0; c < channels; ++c) {
            const std::int64_t plane = (b * channels + c) * h * w;
            for (int ki = 0; ki < k0; ++ki) {
              const std::int64_t y = oy * spec.stride - spec.padding + static_cast<std::int64_t>(ki) * spec.dilation;
              for (int kj = 0; kj < k1; ++kj) {
                const std::int64_t x = ox * spec.stride - spec.padding + static_cast<std::int64_t>(kj) * spec.dilation;
                const std::int64_t feat = tok * dim + (c * k0 + ki) * k1 + kj;
                const bool inside = y >= 0 && y < h && x >= 0 && x < w;
                fn(feat, inside ? plane + y * w + x : -1);
              }
            }
          }
        }
      }
    }
  }
};

inline std::vector<float> coverage_counts(std::int64_t h, std::int64_t w, const UnfoldSpec& spec) {
  UnfoldGeometry g{1, 1, h, w, token_count_1d(h, spec.kernel[0], spec.stride, spec.dilation, spec.padding),
                   token_count_1d(w, spec.kernel[1], spec.stride, spec.dilation, spec.padding), spec};
  std::vector<float> cov(static_cast<std::size_t>(h * w), 0.0F);
  g.for_each([&](std::int64_t, std::int64_t pix) {
    if (pix >= 0) cov[static_cast<std::size_t>(pix)] += 1.0F;
  });
  return cov;
}

}  // namespace detail

/// Per-pixel count of unfold windows covering each pixel of an h x w map.
inline Tensor coverage_map(std::int64_t h, std::int64_t w, const UnfoldSpec& spec) {
  return Tensor(Shape{h, w}, detail::coverage_counts(h, w, spec));
}

/// Overlapped (dilated) patch extraction:
/// [b, d, h, w] -> [b, n_sd, d * K0 * K1], features ordered (channel, ki, kj).
inline Tensor unfold(const Tensor& f, const UnfoldSpec& spec) {
  if (f.rank() != 4) throw ShapeError("unfold expects [b, d, h, w], got " + f.shape().str());
  const detail::UnfoldGeometry g{f.dim(0),
                                 f.dim(1),
                                 f.dim(2),
                                 f.dim(3),
                                 token_count_1d(f.dim(2), spec.kernel[0], spec.stride, spec.dilation, spec.padding),
                                 token_count_1d(f.dim(3), spec.kernel[1], spec.stride, spec.dilation, spec.padding),
                                 spec};
  Tensor out(Shape{g.batch, g.tokens(), g.token_dim()});
  const float* src = f.data().data();
  float* dst = out.data().data();
  g.for_each([&](std::int64_t feat, std::int64_t pix) { dst[feat] = pix >= 0 ? src[pix] : 0.0F; });
  if (Tape* tape = detail::recording_tape(f)) {
    tape->record(out, [f, out, g]() mutable {
      const float* go = out.grad().data();
      float* gf = f.grad_for_accumulate().data();
      g.for_each([&](std::int64_t feat, std::int64_t pix) {
        if (pix >= 0) gf[pix] += go[feat];
      });
    });
  }
  return out;
}

/// Overlap-add of patches back onto an h x w map; the adjoint of unfold.
/// With `normalize`, each pixel is divided by its coverage count so that
/// fold(unfold(F)) reproduces F on every covered pixel. Pixels no window
/// touches come out as zero.
inline Tensor fold(const Tensor& t, std::array<std::int64_t, 2> out_hw, const UnfoldSpec& spec, bool normalize) {
  if (t.rank() != 3) throw ShapeError("fold expects [b, n, d], got " + t.shape().str());
  const std::int64_t oh = token_count_1d(out_hw[0], spec.kernel[0], spec.stride, spec.dilation, spec.padding);
  const std::int64_t ow = token_count_1d(out_hw[1], spec.kernel[1], spec.stride, spec.dilation, spec.padding);
  if (t.dim(1) != oh * ow) {
    throw ShapeError("fold: " + std::to_string(t.dim(1)) + " tokens do not match the " + std::to_string(oh * ow) +
                     " placements of a " + std::to_string(out_hw[0]) + "x" + std::to_string(out_hw[1]) + " map");
  }
  if (t.dim(2) % spec.taps() != 0) {
    throw ShapeError("fold: token dimension " + std::to_string(t.dim(2)) + " is not a multiple of kernel taps");
  }
  const detail::UnfoldGeometry g{t.dim(0), t.dim(2) / spec.taps(), out_hw[0], out_hw[1], oh, ow, spec};
  Tensor out(Shape{g.batch, g.channels, g.h, g.w});
  const float* src = t.data().data();
  float* dst = out.data().data();
  g.for_each([&](std::int64_t feat, std::int64_t pix) {
    if (pix >= 0) dst[pix] += src[feat];
  });
  std::vector<float> inv_cov;
  if (normalize) {
    const auto cov = detail::coverage_counts(g.h, g.w, spec);
    inv_cov.resize(cov.size());
    for (std::size_t i = 0; i < cov.size(); ++i) inv_cov[i] = cov[i] > 0.0F ? 1.0F / cov[i] : 0.0F;
    const std::int64_t plane = g.h * g.w;
    for (std::int64_t p = 0; p < g.batch * g.channels; ++p) {
      for (std::int64_t i = 0; i < plane; ++i) dst[p * plane + i] *= inv_cov[static_cast<std::size_t>(i)];
    }
  }
  if (Tape* tape = detail::recording_tape(t)) {
    tape->record(out, [t, out, g, inv_cov = std::move(inv_cov)]() mutable {
      const float* go = out.grad().data();
      float* gt = t.grad_for_accumulate().data();
      const std::int64_t plane = g.h * g.w;
      const bool norm = !inv_cov.empty();
      g.for_each([&](std::int64_t feat, std::int64_t pix) {
        if (pix < 0) return;
        gt[feat] += norm ? go[pix] * inv_cov[static_cast<std::size_t>(pix % plane)] : go[pix];
      });
    });
  }
  return out;
}

}  // namespace ctformer

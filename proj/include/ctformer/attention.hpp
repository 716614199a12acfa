// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/ops.hpp"
#include "ctformer/rng.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

enum class AttentionMode { kExact, kPerformer };

/// kPaper: T' = MHA(LN(MLP(T))) + T ; out = MLP(LN(T')) + T'.
/// kPreNorm: T' = MHA(LN(T)) + T ; out = MLP(LN(T')) + T'.
enum class BlockOrder { kPaper, kPreNorm };

inline const char* to_string(AttentionMode m) { return m == AttentionMode::kExact ? "exact" : "performer"; }
inline const char* to_string(BlockOrder o) { return o == BlockOrder::kPaper ? "paper" : "prenorm"; }

struct AttentionWeights {
  Tensor w_q;  // [d_in, d_m]
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;  // [d_m, d_in]
  int heads = 1;

  std::int64_t model_dim() const { return w_q.dim(1); }
  std::int64_t head_dim() const { return model_dim() / heads; }
};

/// Attention probabilities of one layer, [b, heads, n, n].
struct AttentionRecord {
  int layer_id = 0;
  Tensor att;
};

struct PerformerSpec {
  int num_features = 32;
  std::uint64_t seed = 0;
};

struct Qkv {
  Tensor q;  // [b, heads, n, d_k]
  Tensor k;
  Tensor v;
};

struct AttentionOutput {
  Tensor out;  // [b, heads, n, d_k]
  std::optional<AttentionRecord> record;
};

namespace detail {

inline Tensor split_heads(const Tensor& t, int heads) {
  const std::int64_t b = t.dim(0), n = t.dim(1), dm = t.dim(2);
  return permute(reshape(t, Shape{b, n, heads, dm / heads}), {0, 2, 1, 3});
}

inline Tensor merge_heads(const Tensor& t) {
  const std::int64_t b = t.dim(0), h = t.dim(1), n = t.dim(2), dk = t.dim(3);
  return reshape(permute(t, {0, 2, 1, 3}), Shape{b, n, h * dk});
}

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4) {
    throw ShapeError("attention expects [b, heads, n, d_k] operands");
  }
  if (q.shape() != k.shape() || k.dim(2) != v.dim(2) || k.dim(0) != v.dim(0) || k.dim(1) != v.dim(1)) {
    throw ShapeError("attention operands disagree: q " + q.shape().str() + " k " + k.shape().str() + " v " +
                     v.shape().str());
  }
}

}  // namespace detail

/// Q = T W_q, K = T W_k, V = T W_v, each split into heads.
inline Qkv project_qkv(const Tensor& t, const AttentionWeights& w) {
  if (t.rank() != 3) throw ShapeError("project_qkv expects [b, n, d], got " + t.shape().str());
  if (w.heads < 1 || w.model_dim() % w.heads != 0) {
    throw ShapeError("model dimension " + std::to_string(w.model_dim()) + " is not divisible by " +
                     std::to_string(w.heads) + " heads");
  }
  if (t.dim(2) != w.w_q.dim(0)) {
    throw ShapeError("project_qkv: token dim " + std::to_string(t.dim(2)) + " does not match weights " +
                     w.w_q.shape().str());
  }
  return Qkv{detail::split_heads(matmul(t, w.w_q), w.heads), detail::split_heads(matmul(t, w.w_k), w.heads),
             detail::split_heads(matmul(t, w.w_v), w.heads)};
}

/// softmax(Q K^T / sqrt(d_k)) V. The probabilities are copied into the record
/// when `capture` is set.
inline AttentionOutput exact_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool capture = false) {
  detail::check_qkv(q, k, v);
  const float scale_factor = 1.0F / std::sqrt(static_cast<float>(q.dim(3)));
  Tensor att = softmax_lastdim(matmul(q, transpose_last2(k)), scale_factor);
  AttentionOutput result{matmul(att, v), std::nullopt};
  if (capture) result.record = AttentionRecord{0, att.detach()};
  return result;
}

/// Attention probabilities only, computed without touching the tape.
inline Tensor attention_probabilities(const Tensor& q, const Tensor& k) {
  Tape::Pause pause;
  const float scale_factor = 1.0F / std::sqrt(static_cast<float>(q.dim(3)));
  return softmax_lastdim(matmul(q, transpose_last2(k)), scale_factor);
}

/// Random projection for positive random features, [d_k, m], drawn from a
/// seeded unit Gaussian.
inline Tensor performer_projection(std::int64_t head_dim, const PerformerSpec& spec) {
  if (spec.num_features < 1) throw ContractError("performer: num_features must be >= 1");
  Rng rng(derive_seed(spec.seed, 0x70657266ULL));
  return Tensor::randn(Shape{head_dim, spec.num_features}, rng);
}

namespace detail {

// phi(x) = exp(w^T x - |x|^2 / 2) / sqrt(m). The subtracted stabilizer is a
// constant per row (queries) or per (batch, head) (keys); it cancels in the
// normalized output.
inline Tensor positive_features(const Tensor& x, const Tensor& projection, bool per_row) {
  const std::int64_t m = projection.dim(1);
  Tensor logits = sub(matmul(x, projection), scale(sum_dim(square(x), 3), 0.5F));
  const std::int64_t b = logits.dim(0), h = logits.dim(1), n = logits.dim(2);
  Tensor stab = per_row ? Tensor(Shape{b, h, n, 1}) : Tensor(Shape{b, h, 1, 1});
  const float* pl = logits.data().data();
  for (std::int64_t g = 0; g < b * h; ++g) {
    float group_max = -INFINITY;
    for (std::int64_t i = 0; i < n; ++i) {
      float row_max = -INFINITY;
      for (std::int64_t j = 0; j < m; ++j) row_max = std::max(row_max, pl[(g * n + i) * m + j]);
      if (per_row) stab[static_cast<std::size_t>(g * n + i)] = row_max;
      group_max = std::max(group_max, row_max);
    }
    if (!per_row) stab[static_cast<std::size_t>(g)] = group_max;
  }
  return scale(exp(sub(logits, stab)), 1.0F / std::sqrt(static_cast<float>(m)));
}

}  // namespace detail

inline constexpr float kPerformerDenominatorFloor = 1e-6F;

/// Linear-cost softmax-kernel approximation:
/// out = phi(Q) (phi(K)^T V) / (phi(Q) (phi(K)^T 1)), with Q and K scaled by
/// d_k^(-1/4) so the kernel estimates exp(q.k / sqrt(d_k)).
inline Tensor performer_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& projection) {
  detail::check_qkv(q, k, v);
  if (projection.rank() != 2 || projection.dim(0) != q.dim(3)) {
    throw ShapeError("performer projection " + projection.shape().str() + " does not match head dim " +
                     std::to_string(q.dim(3)));
  }
  const float qk_scale = 1.0F / std::pow(static_cast<float>(q.dim(3)), 0.25F);
  Tensor phi_q = detail::positive_features(scale(q, qk_scale), projection, true);
  Tensor phi_k = detail::positive_features(scale(k, qk_scale), projection, false);
  Tensor kv = matmul(transpose_last2(phi_k), v);                         // [b, h, m, d_k]
  Tensor numerator = matmul(phi_q, kv);                                  // [b, h, n, d_k]
  Tensor denom = matmul(phi_q, transpose_last2(sum_dim(phi_k, 2)));      // [b, h, n, 1]
  denom = clamp_min(denom, kPerformerDenominatorFloor, &denominator_clamp_counter());
  return div(numerator, denom);
}

inline Tensor performer_attention(const Tensor& q, const Tensor& k, const Tensor& v, const PerformerSpec& spec) {
  return performer_attention(q, k, v, performer_projection(q.dim(3), spec));
}

struct MlpWeights {
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

inline Tensor mlp(const Tensor& t, const MlpWeights& w) {
  return linear(gelu(linear(t, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
}

struct TransformerBlockWeights {
  MlpWeights mlp_in;  // unused with BlockOrder::kPreNorm
  Tensor ln1_gamma, ln1_beta;
  AttentionWeights attn;
  Tensor ln2_gamma, ln2_beta;
  MlpWeights mlp_out;
  AttentionMode mode = AttentionMode::kExact;
  BlockOrder order = BlockOrder::kPaper;
  Tensor performer_projection;  // [d_k, m]; fixed, not trained

  std::int64_t dim() const { return attn.w_q.dim(0); }
};

struct BlockOutput {
  Tensor out;
  std::optional<AttentionRecord> record;
};

inline constexpr float kLayerNormEps = 1e-5F;

/// Multi-head attention on already-normalized tokens, projected back by w_o.
inline BlockOutput multi_head_attention(const Tensor& u, const TransformerBlockWeights& w, bool capture) {
  const Qkv qkv = project_qkv(u, w.attn);
  BlockOutput result;
  Tensor heads_out;
  if (w.mode == AttentionMode::kExact) {
    AttentionOutput a = exact_attention(qkv.q, qkv.k, qkv.v, capture);
    heads_out = a.out;
    result.record = std::move(a.record);
  } else {
    heads_out = performer_attention(qkv.q, qkv.k, qkv.v, w.performer_projection);
    if (capture) result.record = AttentionRecord{0, attention_probabilities(qkv.q, qkv.k)};
  }
  result.out = matmul(detail::merge_heads(heads_out), w.attn.w_o);
  return result;
}

/// One transformer block over [b, n, d] tokens.
inline BlockOutput transformer_block(const Tensor& t, const TransformerBlockWeights& w, bool capture = false) {
  if (t.rank() != 3 || t.dim(2) != w.dim()) {
    throw ShapeError("transformer_block: input " + t.shape().str() + " does not match embedding dim " +
                     std::to_string(w.dim()));
  }
  Tensor attn_in = w.order == BlockOrder::kPaper ? layer_norm(mlp(t, w.mlp_in), w.ln1_gamma, w.ln1_beta, kLayerNormEps)
                                                 : layer_norm(t, w.ln1_gamma, w.ln1_beta, kLayerNormEps);
  BlockOutput a = multi_head_attention(attn_in, w, capture);
  Tensor mid = add(a.out, t);
  Tensor out = add(mlp(layer_norm(mid, w.ln2_gamma, w.ln2_beta, kLayerNormEps), w.mlp_out), mid);
  return BlockOutput{out, std::move(a.record)};
}

enum class Init { kNormal, kZeros, kOnes };

struct BlockShape {
  std::int64_t dim = 64;
  int heads = 1;
  int mlp_ratio = 1;
  AttentionMode mode = AttentionMode::kExact;
  BlockOrder order = BlockOrder::kPaper;
  PerformerSpec performer{};
};

/// Allocates block weights through `make(name, shape, init)` so the caller
/// controls naming and initialization.
template <typename MakeParam>
TransformerBlockWeights create_block_weights(const BlockShape& s, MakeParam&& make) {
  if (s.heads < 1 || s.dim % s.heads != 0) {
    throw ConfigError("embedding dim " + std::to_string(s.dim) + " is not divisible by " + std::to_string(s.heads) +
                      " heads");
  }
  if (s.mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
  const std::int64_t d = s.dim;
  const std::int64_t hidden = d * s.mlp_ratio;
  auto make_mlp = [&](const std::string& prefix) {
    return MlpWeights{make(prefix + ".fc1.weight", Shape{d, hidden}, Init::kNormal),
                      make(prefix + ".fc1.bias", Shape{hidden}, Init::kZeros),
                      make(prefix + ".fc2.weight", Shape{hidden, d}, Init::kNormal),
                      make(prefix + ".fc2.bias", Shape{d}, Init::kZeros)};
  };
  TransformerBlockWeights w;
  w.mode = s.mode;
  w.order = s.order;
  if (s.order == BlockOrder::kPaper) w.mlp_in = make_mlp("mlp_in");
  w.ln1_gamma = make("ln1.gamma", Shape{d}, Init::kOnes);
  w.ln1_beta = make("ln1.beta", Shape{d}, Init::kZeros);
  w.attn.heads = s.heads;
  w.attn.w_q = make("attn.w_q", Shape{d, d}, Init::kNormal);
  w.attn.w_k = make("attn.w_k", Shape{d, d}, Init::kNormal);
  w.attn.w_v = make("attn.w_v", Shape{d, d}, Init::kNormal);
  w.attn.w_o = make("attn.w_o", Shape{d, d}, Init::kNormal);
  w.ln2_gamma = make("ln2.gamma", Shape{d}, Init::kOnes);
  w.ln2_beta = make("ln2.beta", Shape{d}, Init::kZeros);
  w.mlp_out = make_mlp("mlp_out");
  if (s.mode == AttentionMode::kPerformer) w.performer_projection = performer_projection(d / s.heads, s.performer);
  return w;
}

}  // namespace ctformer

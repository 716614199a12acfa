// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// The residual encoder-decoder: tokenization, modules A and B (transformer
// block + T2T dilation block), intermediate blocks, modules C and D (inverse
// T2T dilation block + transformer block) and detokenization, with A->D and
// B->C token skips and an additive image residual.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctformer/attention.hpp"
#include "ctformer/error.hpp"
#include "ctformer/key_value.hpp"
#include "ctformer/ops.hpp"
#include "ctformer/rng.hpp"
#include "ctformer/tensor.hpp"
#include "ctformer/token_ops.hpp"

namespace ctformer {

struct ModelConfig {
  int patch_size = 64;
  int embed_dim = 64;
  int tok_kernel = 7;
  int tok_stride = 2;
  std::array<int, 2> t2t_kernels{3, 3};    // modules A, B; mirrored by D, C
  std::array<int, 2> t2t_dilations{2, 1};  // modules A, B; mirrored by D, C
  std::array<int, 4> shifts{2, 2, -2, -2};  // A, B, C, D
  int intermediate_blocks = 1;
  AttentionMode intermediate_mode = AttentionMode::kExact;
  AttentionMode module_mode = AttentionMode::kPerformer;
  int performer_features = 32;
  bool cyclic_shift_enabled = true;
  int heads = 1;
  int mlp_ratio = 1;
  BlockOrder block_order = BlockOrder::kPaper;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

inline AttentionMode parse_attention_mode(std::string_view key, std::string_view v) {
  if (v == "exact") return AttentionMode::kExact;
  if (v == "performer") return AttentionMode::kPerformer;
  throw ConfigError("bad value for '" + std::string(key) + "': expected exact|performer");
}

inline BlockOrder parse_block_order(std::string_view key, std::string_view v) {
  if (v == "paper") return BlockOrder::kPaper;
  if (v == "prenorm") return BlockOrder::kPreNorm;
  throw ConfigError("bad value for '" + std::string(key) + "': expected paper|prenorm");
}

/// Applies one key; returns false if the key is not a model key.
inline bool apply_model_key(ModelConfig& c, std::string_view key, std::string_view value) {
  auto pair = [&](std::array<int, 2>& dst) {
    const auto v = parse_int_list(key, value);
    if (v.size() != 2) throw ConfigError("'" + std::string(key) + "' expects two integers");
    dst = {v[0], v[1]};
  };
  if (key == "patch_size") c.patch_size = parse_number<int>(key, value);
  else if (key == "embed_dim") c.embed_dim = parse_number<int>(key, value);
  else if (key == "tok_kernel") c.tok_kernel = parse_number<int>(key, value);
  else if (key == "tok_stride") c.tok_stride = parse_number<int>(key, value);
  else if (key == "t2t_kernels") pair(c.t2t_kernels);
  else if (key == "t2t_dilations") pair(c.t2t_dilations);
  else if (key == "shifts") {
    const auto v = parse_int_list(key, value);
    if (v.size() != 4) throw ConfigError("'shifts' expects four integers");
    c.shifts = {v[0], v[1], v[2], v[3]};
  } else if (key == "intermediate_blocks") c.intermediate_blocks = parse_number<int>(key, value);
  else if (key == "intermediate_mode") c.intermediate_mode = parse_attention_mode(key, value);
  else if (key == "module_mode") c.module_mode = parse_attention_mode(key, value);
  else if (key == "performer_features") c.performer_features = parse_number<int>(key, value);
  else if (key == "cyclic_shift_enabled") c.cyclic_shift_enabled = parse_bool(key, value);
  else if (key == "heads") c.heads = parse_number<int>(key, value);
  else if (key == "mlp_ratio") c.mlp_ratio = parse_number<int>(key, value);
  else if (key == "block_order") c.block_order = parse_block_order(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else return false;
  return true;
}

inline KeyValues model_config_entries(const ModelConfig& c) {
  return {{"patch_size", std::to_string(c.patch_size)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"tok_kernel", std::to_string(c.tok_kernel)},
          {"tok_stride", std::to_string(c.tok_stride)},
          {"t2t_kernels", join_ints(c.t2t_kernels)},
          {"t2t_dilations", join_ints(c.t2t_dilations)},
          {"shifts", join_ints(c.shifts)},
          {"intermediate_blocks", std::to_string(c.intermediate_blocks)},
          {"intermediate_mode", to_string(c.intermediate_mode)},
          {"module_mode", to_string(c.module_mode)},
          {"performer_features", std::to_string(c.performer_features)},
          {"cyclic_shift_enabled", c.cyclic_shift_enabled ? "true" : "false"},
          {"heads", std::to_string(c.heads)},
          {"mlp_ratio", std::to_string(c.mlp_ratio)},
          {"block_order", to_string(c.block_order)},
          {"seed", std::to_string(c.seed)}};
}

inline std::string model_config_to_text(const ModelConfig& c) { return format_key_values(model_config_entries(c)); }

inline ModelConfig model_config_from_text(std::string_view text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (!apply_model_key(c, k, v)) throw ConfigError("unknown model config key '" + k + "'");
  }
  return c;
}

struct StagePlan {
  std::string name;
  std::int64_t tokens = 0;
};

/// Shape calculus for one configuration, validated stage by stage.
struct ShapePlan {
  UnfoldSpec tok_spec;
  std::array<UnfoldSpec, 2> t2t_specs;  // after A, after B
  std::int64_t tok_grid = 0;            // side of the module A / D token map
  std::int64_t mid_grid_b = 0;          // side of the module B / C token map
  std::int64_t bottleneck_grid = 0;     // side of the intermediate token map
  std::vector<std::string> layer_names;  // A, B, I1..Ik, C, D
  std::vector<std::int64_t> layer_tokens;

  std::size_t layers() const { return layer_names.size(); }
  std::size_t index_c() const { return layers() - 2; }
  std::size_t index_d() const { return layers() - 1; }

  /// Token count after tokenization followed by the count at every block.
  std::vector<StagePlan> trace() const {
    std::vector<StagePlan> t{{"tokenize", tok_grid * tok_grid}};
    for (std::size_t i = 0; i < layers(); ++i) t.push_back({layer_names[i], layer_tokens[i]});
    return t;
  }
};

inline ShapePlan plan_shapes(const ModelConfig& c) {
  auto fail = [](const std::string& stage, const std::string& why) -> ConfigError {
    return ConfigError("stage '" + stage + "': " + why);
  };
  if (c.embed_dim < 1) throw fail("tokenize", "embed_dim must be positive");
  if (c.heads < 1 || c.embed_dim % c.heads != 0) {
    throw fail("tokenize", "embed_dim " + std::to_string(c.embed_dim) + " not divisible by heads " +
                               std::to_string(c.heads));
  }
  if (c.intermediate_blocks < 1) throw fail("I1", "at least one intermediate block is required");
  if (c.performer_features < 1) throw fail("A", "performer_features must be >= 1");
  if (c.mlp_ratio < 1) throw fail("A", "mlp_ratio must be >= 1");

  ShapePlan p;
  p.tok_spec = UnfoldSpec::square(c.tok_kernel, c.tok_stride, 1, 0);
  for (std::size_t i = 0; i < 2; ++i) p.t2t_specs[i] = UnfoldSpec::square(c.t2t_kernels[i], 1, c.t2t_dilations[i], 0);

  auto grid_after = [&](const std::string& stage, std::int64_t side, const UnfoldSpec& spec) {
    try {
      return token_count_1d(side, spec.kernel[0], spec.stride, spec.dilation, spec.padding);
    } catch (const ShapeError& e) {
      throw fail(stage, e.what());
    }
  };
  auto check_shift = [&](const std::string& stage, int shift, std::int64_t side) {
    if (c.cyclic_shift_enabled && std::abs(shift) >= side) {
      throw fail(stage, "cyclic shift " + std::to_string(shift) + " not below map side " + std::to_string(side));
    }
  };

  p.tok_grid = grid_after("tokenize", c.patch_size, p.tok_spec);
  check_shift("A", c.shifts[0], p.tok_grid);
  p.mid_grid_b = grid_after("A", p.tok_grid, p.t2t_specs[0]);
  check_shift("B", c.shifts[1], p.mid_grid_b);
  p.bottleneck_grid = grid_after("B", p.mid_grid_b, p.t2t_specs[1]);
  if (c.shifts[2] != -c.shifts[1]) {
    throw fail("C", "shift " + std::to_string(c.shifts[2]) + " must negate module B shift " +
                        std::to_string(c.shifts[1]));
  }
  if (c.shifts[3] != -c.shifts[0]) {
    throw fail("D", "shift " + std::to_string(c.shifts[3]) + " must negate module A shift " +
                        std::to_string(c.shifts[0]));
  }

  p.layer_names = {"A", "B"};
  p.layer_tokens = {p.tok_grid * p.tok_grid, p.mid_grid_b * p.mid_grid_b};
  for (int i = 0; i < c.intermediate_blocks; ++i) {
    p.layer_names.push_back("I" + std::to_string(i + 1));
    p.layer_tokens.push_back(p.bottleneck_grid * p.bottleneck_grid);
  }
  p.layer_names.insert(p.layer_names.end(), {"C", "D"});
  p.layer_tokens.insert(p.layer_tokens.end(), {p.mid_grid_b * p.mid_grid_b, p.tok_grid * p.tok_grid});
  return p;
}

struct AffineWeights {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]

  Tensor operator()(const Tensor& t) const { return linear(t, weight, bias); }
};

struct ForwardResult {
  Tensor output;
  std::vector<AttentionRecord> records;
};

/// Forward pass with every block output kept, for interpretation.
struct ForwardTrace {
  Tensor input;
  Tensor output;
  std::vector<Tensor> block_outputs;
  std::vector<AttentionRecord> records;
};

class CTformerModel {
 public:
  /// Builds and initializes the network: truncated normal (std 0.02) for
  /// projections, zeros for biases, ones for layer-norm scales.
  static CTformerModel build(const ModelConfig& config) {
    CTformerModel m(config, plan_shapes(config));
    Rng rng(derive_seed(config.seed, 0x696e6974ULL));
    std::string prefix;
    auto make = [&](const std::string& name, const Shape& shape, Init init) {
      Tensor t(shape);
      if (init == Init::kNormal) {
        for (float& v : t.data()) v = static_cast<float>(rng.truncated_normal(kInitStd));
      } else if (init == Init::kOnes) {
        for (float& v : t.data()) v = 1.0F;
      }
      t.set_requires_grad(true);
      m.params_.push_back(Parameter{prefix + name, t});
      return t;
    };
    auto make_affine = [&](const std::string& name, std::int64_t din, std::int64_t dout) {
      AffineWeights a;
      a.weight = make(name + ".weight", Shape{din, dout}, Init::kNormal);
      a.bias = make(name + ".bias", Shape{dout}, Init::kZeros);
      return a;
    };
    const ModelConfig& c = config;
    const ShapePlan& p = m.plan_;
    const std::int64_t d = c.embed_dim;
    const std::int64_t tok_dim = static_cast<std::int64_t>(p.tok_spec.taps());

    auto block_shape = [&](std::size_t layer) {
      BlockShape s;
      s.dim = d;
      s.heads = c.heads;
      s.mlp_ratio = c.mlp_ratio;
      s.order = c.block_order;
      const bool module = layer < 2 || layer >= p.index_c();
      s.mode = module ? c.module_mode : c.intermediate_mode;
      s.performer = PerformerSpec{c.performer_features, derive_seed(c.seed, 0x1000 + layer)};
      return s;
    };
    auto make_block = [&](std::size_t layer) {
      prefix = p.layer_names[layer] + ".block.";
      m.blocks_.push_back(create_block_weights(block_shape(layer), make));
      prefix.clear();
    };

    m.tokenize_ = make_affine("tokenize", tok_dim, d);
    make_block(0);
    m.t2t_[0] = make_affine("A.t2t", d * p.t2t_specs[0].taps(), d);
    make_block(1);
    m.t2t_[1] = make_affine("B.t2t", d * p.t2t_specs[1].taps(), d);
    for (std::size_t i = 2; i < p.index_c(); ++i) make_block(i);
    m.it2t_[0] = make_affine("C.it2t", d, d * p.t2t_specs[1].taps());
    make_block(p.index_c());
    m.it2t_[1] = make_affine("D.it2t", d, d * p.t2t_specs[0].taps());
    make_block(p.index_d());
    m.detokenize_ = make_affine("detokenize", d, tok_dim);

    // Dry run through the full shape plan.
    {
      Tape::Pause pause;
      const Tensor probe(Shape{1, 1, c.patch_size, c.patch_size});
      const ForwardTrace t = m.forward_trace(probe, false);
      for (std::size_t i = 0; i < p.layers(); ++i) {
        if (t.block_outputs[i].dim(1) != p.layer_tokens[i]) {
          throw ConfigError("stage '" + p.layer_names[i] + "': dry run produced " +
                            std::to_string(t.block_outputs[i].dim(1)) + " tokens, plan expects " +
                            std::to_string(p.layer_tokens[i]));
        }
      }
    }
    return m;
  }

  CTformerModel(CTformerModel&&) noexcept = default;
  CTformerModel& operator=(CTformerModel&&) noexcept = default;
  CTformerModel(const CTformerModel&) = delete;
  CTformerModel& operator=(const CTformerModel&) = delete;

  /// Independent copy with identical parameter values.
  CTformerModel clone() const {
    CTformerModel m = build(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::copy(params_[i].value.data().begin(), params_[i].value.data().end(), m.params_[i].value.data().begin());
    }
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ShapePlan& plan() const noexcept { return plan_; }
  int patch_size() const noexcept { return config_.patch_size; }

  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  Tensor* find_parameter(std::string_view name) {
    for (Parameter& p : params_) {
      if (p.name == name) return &p.value;
    }
    return nullptr;
  }

  /// Sum of stored parameter sizes.
  std::int64_t stored_parameter_count() const {
    std::int64_t n = 0;
    for (const Parameter& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (Parameter& p : params_) p.value.zero_grad();
  }

  std::size_t layers() const noexcept { return blocks_.size(); }
  const TransformerBlockWeights& block(std::size_t layer) const { return blocks_.at(layer); }
  TransformerBlockWeights& block(std::size_t layer) { return blocks_.at(layer); }
  const AffineWeights& tokenizer() const noexcept { return tokenize_; }
  const AffineWeights& detokenizer() const noexcept { return detokenize_; }

  /// Image patch [b, 1, p, p] -> tokens [b, n, d].
  Tensor tokenize(const Tensor& patch) const {
    check_patch(patch);
    return tokenize_(unfold(patch, plan_.tok_spec));
  }

  /// Tokens [b, n, d] -> image [b, 1, p, p] (without the image residual).
  Tensor detokenize(const Tensor& tokens) const {
    return fold(detokenize_(tokens), {config_.patch_size, config_.patch_size}, plan_.tok_spec, true);
  }

  /// Tokens entering the transformer block of `layer`, given the previous
  /// block output and the outputs of earlier layers (for the skips).
  /// Layer 0 takes the tokenized image as `prev`.
  Tensor layer_input(std::size_t layer, const Tensor& prev, std::span<const Tensor> block_outputs) const {
    const std::size_t c_idx = plan_.index_c(), d_idx = plan_.index_d();
    if (layer == 0) return prev;
    if (layer == 1) return t2t_dilation(prev, 0);
    if (layer == 2) return t2t_dilation(prev, 1);
    if (layer < c_idx) return prev;
    if (layer == c_idx) return add(inverse_t2t_dilation(prev, 0), block_outputs[1]);
    if (layer == d_idx) return add(inverse_t2t_dilation(prev, 1), block_outputs[0]);
    throw ContractError("layer index out of range");
  }

  ForwardTrace forward_trace(const Tensor& patch, bool capture) const {
    ForwardTrace t;
    t.input = patch;
    Tensor x = tokenize(patch);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = layer_input(i, x, t.block_outputs);
      BlockOutput out = transformer_block(x, blocks_[i], capture);
      if (out.record) {
        out.record->layer_id = static_cast<int>(i) + 1;
        t.records.push_back(std::move(*out.record));
      }
      x = out.out;
      t.block_outputs.push_back(x);
    }
    t.output = add(patch, detokenize(x));
    return t;
  }

  /// Denoised patch = patch + decoder output. With `capture`, one attention
  /// record per block in order A, B, intermediates, C, D.
  ForwardResult forward(const Tensor& patch, bool capture = false) const {
    ForwardTrace t = forward_trace(patch, capture);
    return ForwardResult{t.output, std::move(t.records)};
  }

  /// Inference without recording, for tiled inference.
  Tensor denoise_patches(const Tensor& patches) const {
    Tape::Pause pause;
    return forward(patches, false).output;
  }

  /// Mapping from a token-grid cell of `layer` to the original image: the
  /// cell (i, j) sits near pixel (origin + stride * i, origin + stride * j).
  std::pair<double, double> layer_pixel_map(std::size_t layer) const {
    // Module A/D grid: tokenization windows.
    const double tok_origin = (plan_.tok_spec.extent(0) - 1) / 2.0;
    const double tok_stride = plan_.tok_spec.stride;
    auto grid_to_tok = [&](double origin, double stride) {
      return std::pair{tok_origin + tok_stride * origin, tok_stride * stride};
    };
    const int shift_a = config_.cyclic_shift_enabled ? config_.shifts[0] : 0;
    const int shift_b = config_.cyclic_shift_enabled ? config_.shifts[1] : 0;
    // Window centre in the shifted map, minus the shift, in previous-grid units.
    const double b_origin = (plan_.t2t_specs[0].extent(0) - 1) / 2.0 - shift_a;
    const double i_origin = (plan_.t2t_specs[1].extent(0) - 1) / 2.0 - shift_b;
    if (layer == 0 || layer == plan_.index_d()) return grid_to_tok(0.0, 1.0);
    if (layer == 1 || layer == plan_.index_c()) return grid_to_tok(b_origin, 1.0);
    return grid_to_tok(b_origin + i_origin, 1.0);
  }

  /// Side of the token grid of `layer`.
  std::int64_t layer_grid(std::size_t layer) const { return square_side(plan_.layer_tokens.at(layer)); }

 private:
  static constexpr double kInitStd = 0.02;

  CTformerModel(ModelConfig config, ShapePlan plan) : config_(std::move(config)), plan_(std::move(plan)) {}

  void check_patch(const Tensor& patch) const {
    if (patch.rank() != 4 || patch.dim(1) != 1 || patch.dim(2) != config_.patch_size ||
        patch.dim(3) != config_.patch_size) {
      throw ShapeError("model expects [b, 1, " + std::to_string(config_.patch_size) + ", " +
                       std::to_string(config_.patch_size) + "] patches, got " + patch.shape().str());
    }
  }

  int shift(std::size_t module) const { return config_.cyclic_shift_enabled ? config_.shifts[module] : 0; }

  // Encoder T2TD after module A (which = 0) or B (which = 1).
  Tensor t2t_dilation(const Tensor& tokens, std::size_t which) const {
    Tensor f = tokens_to_map(tokens);
    if (const int s = shift(which); s != 0) f = cyclic_shift(f, ShiftSpec{s});
    return t2t_[which](unfold(f, plan_.t2t_specs[which]));
  }

  // Decoder IT2TD of module C (which = 0, mirrors B) or D (which = 1, mirrors A).
  Tensor inverse_t2t_dilation(const Tensor& tokens, std::size_t which) const {
    const std::size_t mirror = 1 - which;
    const std::int64_t side = mirror == 0 ? plan_.tok_grid : plan_.mid_grid_b;
    Tensor f = fold(it2t_[which](tokens), {side, side}, plan_.t2t_specs[mirror], true);
    if (const int s = shift(2 + which); s != 0) f = cyclic_shift(f, ShiftSpec{s});
    return map_to_tokens(f);
  }

  ModelConfig config_;
  ShapePlan plan_;
  std::vector<Parameter> params_;
  std::vector<TransformerBlockWeights> blocks_;
  AffineWeights tokenize_, detokenize_;
  std::array<AffineWeights, 2> t2t_, it2t_;
};

inline CTformerModel build(const ModelConfig& config) { return CTformerModel::build(config); }

inline ForwardResult forward(const CTformerModel& model, const Tensor& patch, bool capture = false) {
  return model.forward(patch, capture);
}

/// Closed-form trainable parameter count for a configuration.
inline std::int64_t analytic_param_count(const ModelConfig& c) {
  const ShapePlan p = plan_shapes(c);
  const std::int64_t d = c.embed_dim;
  const std::int64_t hidden = d * c.mlp_ratio;
  const std::int64_t tok = p.tok_spec.taps();
  auto affine = [](std::int64_t din, std::int64_t dout) { return din * dout + dout; };
  const std::int64_t mlp = affine(d, hidden) + affine(hidden, d);
  const std::int64_t block = (c.block_order == BlockOrder::kPaper ? mlp : 0) + 2 * d + 4 * d * d + 2 * d + mlp;
  std::int64_t total = affine(tok, d) + affine(d, tok);
  total += static_cast<std::int64_t>(p.layers()) * block;
  for (const UnfoldSpec& s : p.t2t_specs) total += affine(d * s.taps(), d) + affine(d, d * s.taps());
  return total;
}

inline std::int64_t count_params(const CTformerModel& model) { return analytic_param_count(model.config()); }

inline constexpr std::int64_t matmul_macs(std::int64_t m, std::int64_t k, std::int64_t n) { return m * k * n; }

/// Multiply-accumulates of one forward pass over one patch. Every matrix
/// product (m x k)(k x n) counts m*k*n; elementwise work is not counted.
inline std::int64_t count_macs(const ModelConfig& c) {
  const ShapePlan p = plan_shapes(c);
  const std::int64_t d = c.embed_dim;
  const std::int64_t hidden = d * c.mlp_ratio;
  const std::int64_t dk = d / c.heads;
  const std::int64_t m = c.performer_features;
  const std::int64_t tok_dim = p.tok_spec.taps();
  const std::int64_t n0 = p.tok_grid * p.tok_grid;

  auto block_macs = [&](std::int64_t n, AttentionMode mode) {
    const std::int64_t mlp = matmul_macs(n, d, hidden) + matmul_macs(n, hidden, d);
    std::int64_t total = (c.block_order == BlockOrder::kPaper ? mlp : 0) + mlp;
    total += 3 * matmul_macs(n, d, d) + matmul_macs(n, d, d);
    if (mode == AttentionMode::kExact) {
      total += c.heads * (matmul_macs(n, dk, n) + matmul_macs(n, n, dk));
    } else {
      total += c.heads * (2 * matmul_macs(n, dk, m) + matmul_macs(m, n, dk) + matmul_macs(n, m, dk) +
                          matmul_macs(n, m, 1));
    }
    return total;
  };

  std::int64_t total = matmul_macs(n0, tok_dim, d) + matmul_macs(n0, d, tok_dim);
  for (std::size_t i = 0; i < p.layers(); ++i) {
    const bool module = i < 2 || i >= p.index_c();
    total += block_macs(p.layer_tokens[i], module ? c.module_mode : c.intermediate_mode);
  }
  // T2TD projections after A and B, IT2TD projections in C and D.
  total += matmul_macs(p.layer_tokens[1], d * p.t2t_specs[0].taps(), d);
  total += matmul_macs(p.layer_tokens[2], d * p.t2t_specs[1].taps(), d);
  total += matmul_macs(p.layer_tokens[p.index_c() - 1], d, d * p.t2t_specs[1].taps());
  total += matmul_macs(p.layer_tokens[p.index_c()], d, d * p.t2t_specs[0].taps());
  return total;
}

inline std::int64_t count_macs(const CTformerModel& model) { return count_macs(model.config()); }

}  // namespace ctformer

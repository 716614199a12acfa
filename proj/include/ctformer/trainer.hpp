// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// MSE training with Adam, geometric learning-rate decay, aligned patch
// sampling and rotation/flip augmentation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/io.hpp"
#include "ctformer/key_value.hpp"
#include "ctformer/model.hpp"
#include "ctformer/ops.hpp"
#include "ctformer/rng.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

struct TrainConfig {
  double lr_start = 1e-5;
  double lr_end = 1e-6;
  int epochs = 2000;  // optimizer steps
  int batch_size = 16;
  int patches_per_slice = 4;
  int patch_size = 64;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  double grad_clip = 0.0;    // global-norm clip; 0 disables
  bool augment = true;

  void validate() const {
    if (!(lr_start > 0.0) || !(lr_end > 0.0) || lr_end > lr_start) {
      throw ConfigError("learning rates must satisfy 0 < lr_end <= lr_start");
    }
    if (epochs < 1 || batch_size < 1 || patches_per_slice < 1 || patch_size < 1 || checkpoint_every < 0) {
      throw ConfigError("training counts must be positive");
    }
    if (batch_size % patches_per_slice != 0) {
      throw ConfigError("batch_size must be a multiple of patches_per_slice");
    }
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  }
};

inline bool apply_train_key(TrainConfig& c, std::string_view key, std::string_view value) {
  if (key == "lr_start") c.lr_start = parse_number<double>(key, value);
  else if (key == "lr_end") c.lr_end = parse_number<double>(key, value);
  else if (key == "epochs" || key == "steps") c.epochs = parse_number<int>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<int>(key, value);
  else if (key == "patches_per_slice") c.patches_per_slice = parse_number<int>(key, value);
  else if (key == "train_seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, value);
  else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, value);
  else if (key == "augment") c.augment = parse_bool(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Loss and optimizer.

/// Mean squared error over all elements.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: shapes " + pred.shape().str() + " and " + target.shape().str() + " differ");
  }
  const std::size_t n = pred.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(std::max<std::size_t>(n, 1))));
  if (Tape* tape = detail::recording_tape(pred, target)) {
    tape->record(out, [pred, target, out, n]() {
      const float g = out.grad()[0] * 2.0F / static_cast<float>(n);
      if (pred.requires_grad()) {
        float* gp = pred.grad_for_accumulate().data();
        for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pred[i] - target[i]);
      }
      if (target.requires_grad()) {
        float* gt = target.grad_for_accumulate().data();
        for (std::size_t i = 0; i < n; ++i) gt[i] -= g * (pred[i] - target[i]);
      }
    });
  }
  return out;
}

struct AdamMoments {
  Tensor m;
  Tensor v;
};

/// Moment buffers keyed by parameter name, so the update does not depend on
/// the order parameters are passed in.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

/// One Adam update with bias correction, reading gradients from each
/// parameter's gradient buffer.
inline void adam_step(std::vector<Parameter>& params, AdamState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (Parameter& p : params) {
    auto [it, inserted] = state.moments.try_emplace(p.name);
    AdamMoments& mom = it->second;
    if (inserted) {
      mom.m = Tensor(p.value.shape());
      mom.v = Tensor(p.value.shape());
    } else if (mom.m.shape() != p.value.shape()) {
      throw ShapeError("adam moments for '" + p.name + "' have shape " + mom.m.shape().str());
    }
    std::span<float> w = p.value.data();
    std::span<const float> g = std::as_const(p.value).grad();
    std::span<float> m = mom.m.data();
    std::span<float> v = mom.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps));
    }
  }
}

/// Geometric decay from lr_start at epoch 0 to lr_end at epoch == epochs.
inline double lr_at(std::int64_t epoch, const TrainConfig& cfg) {
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, t);
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params) {
    for (float g : std::as_const(p.value).grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (Parameter& p : params) {
      for (float& g : p.value.grad()) g *= s;
    }
  }
  return norm;
}

// Sidecar file for optimizer state: "CTFA", step (u32 low, u32 high),
// count, then (name length, name, m record, v record) per parameter.
inline void save_adam_state(const std::filesystem::path& path, const AdamState& s) {
  auto os = io_detail::open_out(path);
  os.write("CTFA", 4);
  const auto step = static_cast<std::uint64_t>(s.step);
  io_detail::put_u32(os, static_cast<std::uint32_t>(step & 0xFFFFFFFFULL));
  io_detail::put_u32(os, static_cast<std::uint32_t>(step >> 32));
  io_detail::put_u32(os, static_cast<std::uint32_t>(s.moments.size()));
  for (const auto& [name, mom] : s.moments) {
    io_detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, mom.m);
    write_tensor(os, mom.v);
  }
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

inline AdamState load_adam_state(const std::filesystem::path& path) {
  auto is = io_detail::open_in(path);
  io_detail::expect_magic(is, "CTFA");
  AdamState s;
  const std::uint64_t lo = io_detail::get_u32(is, "adam step");
  const std::uint64_t hi = io_detail::get_u32(is, "adam step");
  s.step = static_cast<std::int64_t>(lo | (hi << 32));
  const std::uint32_t count = io_detail::get_u32(is, "adam count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io_detail::get_u32(is, "adam name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated adam entry name");
    AdamMoments mom;
    mom.m = read_tensor(is);
    mom.v = read_tensor(is);
    s.moments.emplace(std::move(name), std::move(mom));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Sampling and augmentation.

struct CropInfo {
  std::size_t slice = 0;
  std::int64_t y = 0;
  std::int64_t x = 0;
};

struct Batch {
  Tensor ld;  // [b, 1, p, p]
  Tensor nd;  // [b, 1, p, p]
  std::vector<CropInfo> crops;
};

namespace train_detail {

inline void copy_crop(const Tensor& img, std::int64_t y, std::int64_t x, std::int64_t p, float* dst) {
  const std::int64_t w = img.dim(1);
  for (std::int64_t i = 0; i < p; ++i) {
    const float* src = img.data().data() + (y + i) * w + x;
    std::copy(src, src + p, dst + i * p);
  }
}

}  // namespace train_detail

/// Draws batch_size / patches_per_slice distinct slices (with replacement
/// only when the dataset has fewer slices than that) and patches_per_slice
/// aligned random crops from each.
inline Batch sample_batch(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  if (ds.empty()) throw DataError("sample_batch: empty dataset");
  const std::int64_t p = cfg.patch_size;
  for (const SlicePair& s : ds) {
    if (s.ld.rank() != 2 || s.ld.shape() != s.nd.shape()) {
      throw DataError("slice '" + s.id + "' is not an aligned 2-D pair");
    }
    if (s.ld.dim(0) < p || s.ld.dim(1) < p) {
      throw DataError("slice '" + s.id + "' " + s.ld.shape().str() + " is smaller than patch " + std::to_string(p));
    }
  }
  const std::size_t groups = static_cast<std::size_t>(cfg.batch_size / cfg.patches_per_slice);
  std::vector<std::size_t> slices;
  if (ds.size() >= groups) {
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < groups; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    slices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(groups));
  } else {
    for (std::size_t i = 0; i < groups; ++i) slices.push_back(rng.below(ds.size()));
  }

  Batch b;
  const std::int64_t n = cfg.batch_size;
  b.ld = Tensor(Shape{n, 1, p, p});
  b.nd = Tensor(Shape{n, 1, p, p});
  std::int64_t k = 0;
  for (std::size_t s : slices) {
    const SlicePair& pair = ds[s];
    for (int c = 0; c < cfg.patches_per_slice; ++c, ++k) {
      const std::int64_t y = rng.range(0, pair.ld.dim(0) - p);
      const std::int64_t x = rng.range(0, pair.ld.dim(1) - p);
      train_detail::copy_crop(pair.ld, y, x, p, b.ld.data().data() + k * p * p);
      train_detail::copy_crop(pair.nd, y, x, p, b.nd.data().data() + k * p * p);
      b.crops.push_back({s, y, x});
    }
  }
  return b;
}

enum class Transform { kIdentity, kRot90, kRot180, kRot270, kFlipUpDown, kFlipLeftRight };
inline constexpr int kTransformCount = 6;

/// Applies `t` to a square [p, p] block stored row-major.
inline void transform_square(const float* src, float* dst, std::int64_t p, Transform t) {
  for (std::int64_t i = 0; i < p; ++i) {
    for (std::int64_t j = 0; j < p; ++j) {
      std::int64_t si = i, sj = j;
      switch (t) {
        case Transform::kIdentity: break;
        case Transform::kRot90: si = j, sj = p - 1 - i; break;  // counter-clockwise
        case Transform::kRot180: si = p - 1 - i, sj = p - 1 - j; break;
        case Transform::kRot270: si = p - 1 - j, sj = i; break;
        case Transform::kFlipUpDown: si = p - 1 - i; break;
        case Transform::kFlipLeftRight: sj = p - 1 - j; break;
      }
      dst[i * p + j] = src[si * p + sj];
    }
  }
}

inline Tensor apply_transform(const Tensor& img, Transform t) {
  if (img.rank() != 2 || img.dim(0) != img.dim(1)) throw ShapeError("transforms need a square [p, p] image");
  Tensor out(img.shape());
  transform_square(img.data().data(), out.data().data(), img.dim(0), t);
  return out;
}

inline Transform draw_transform(Rng& rng) { return static_cast<Transform>(rng.below(kTransformCount)); }

/// Same random rotation or flip (identity included) for both images.
inline std::pair<Tensor, Tensor> augment(const Tensor& ld, const Tensor& nd, Rng& rng) {
  const Transform t = draw_transform(rng);
  return {apply_transform(ld, t), apply_transform(nd, t)};
}

/// Augments every pair of a batch in place.
inline void augment_batch(Batch& b, Rng& rng) {
  const std::int64_t p = b.ld.dim(2);
  std::vector<float> tmp(static_cast<std::size_t>(p * p));
  for (std::int64_t k = 0; k < b.ld.dim(0); ++k) {
    const Transform t = draw_transform(rng);
    for (Tensor* img : {&b.ld, &b.nd}) {
      float* block = img->data().data() + k * p * p;
      transform_square(block, tmp.data(), p, t);
      std::copy(tmp.begin(), tmp.end(), block);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct LossLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainOptions {
  std::filesystem::path log_path;        // empty: no loss log file
  std::filesystem::path checkpoint_dir;  // used when checkpoint_every > 0
  std::function<void(const LossLogEntry&)> on_step;
};

struct TrainResult {
  std::vector<LossLogEntry> log;
};

/// Runs one optimizer step and returns the batch loss before the update.
/// Each step draws its batch from a generator seeded by (seed, step), so a
/// resumed run sees the same batches as an uninterrupted one.
inline LossLogEntry train_step(CTformerModel& model, const Dataset& ds, const TrainConfig& cfg, AdamState& adam) {
  const std::int64_t step = adam.step;
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
  Batch batch = sample_batch(ds, cfg, rng);
  if (cfg.augment) augment_batch(batch, rng);

  model.zero_grad();
  Tape tape;
  Tensor loss;
  {
    Tape::Scope scope(tape);
    loss = mse_loss(model.forward(batch.ld).output, batch.nd);
    tape.backward(loss);
  }
  if (!std::isfinite(loss.item())) throw NumericError("non-finite loss at step " + std::to_string(step));
  const double norm = clip_grad_norm(model.parameters(), cfg.grad_clip);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
  const double lr = lr_at(step, cfg);
  adam_step(model.parameters(), adam, lr);
  return {step, loss.item(), lr};
}

inline void write_loss_line(std::ostream& os, const LossLogEntry& e) {
  os << e.step << '\t' << e.loss << '\t' << e.lr << '\n';
}

/// Trains until `cfg.epochs` steps have been taken in total, continuing from
/// `adam.step`. Appends "step<TAB>loss<TAB>lr" lines to the loss log and
/// writes ckpt_<step>.ctfk (+ .adam sidecar) every checkpoint_every steps.
inline TrainResult train(CTformerModel& model, const Dataset& ds, const TrainConfig& cfg, AdamState& adam,
                         const TrainOptions& opt = {}) {
  cfg.validate();
  if (cfg.patch_size != model.patch_size()) {
    throw ConfigError("train patch_size " + std::to_string(cfg.patch_size) + " does not match model patch " +
                      std::to_string(model.patch_size()));
  }
  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, adam.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open loss log '" + opt.log_path.string() + "'");
    log.precision(9);
  }
  if (cfg.checkpoint_every > 0 && !opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  TrainResult result;
  while (adam.step < cfg.epochs) {
    const LossLogEntry e = train_step(model, ds, cfg, adam);
    result.log.push_back(e);
    if (log.is_open()) {
      write_loss_line(log, e);
      log.flush();
    }
    if (opt.on_step) opt.on_step(e);
    if (cfg.checkpoint_every > 0 && !opt.checkpoint_dir.empty() && adam.step % cfg.checkpoint_every == 0) {
      const auto stem = opt.checkpoint_dir / ("ckpt_" + std::to_string(adam.step));
      save_model(stem.string() + ".ctfk", model);
      save_adam_state(stem.string() + ".adam", adam);
    }
  }
  return result;
}

inline TrainResult train(CTformerModel& model, const Dataset& ds, const TrainConfig& cfg,
                         const TrainOptions& opt = {}) {
  AdamState adam;
  return train(model, ds, cfg, adam, opt);
}

/// Moving average with a trailing window, for smoothing loss curves.
inline std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace ctformer

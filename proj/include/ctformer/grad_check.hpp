// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ctformer/ops.hpp"
#include "ctformer/rng.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

struct GradCheckOptions {
  float step = 1e-3F;
  float tol = 1e-2F;
  // Entries per tensor; larger tensors are sampled.
  std::size_t max_entries = 64;
  // Denominator floor as a fraction of the largest finite-difference
  // gradient magnitude, so near-zero entries are judged on absolute error.
  double floor_fraction = 0.05;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  bool passed = true;
  double max_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central finite differences of a scalar function against tape gradients
/// for every tensor in `wrt`. The tensors are perturbed in place and
/// restored.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> wrt,
                                  const GradCheckOptions& opt = {}) {
  std::vector<bool> had_grad;
  for (Tensor& t : wrt) {
    had_grad.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }

  auto eval = [&]() {
    Tape::Pause pause;
    return static_cast<double>(loss_fn().item());
  };

  Rng rng(opt.seed);
  GradCheckResult result;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor& t = wrt[ti];
    const std::vector<float> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.max_entries) {
      for (std::size_t i = 0; i < opt.max_entries; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      }
      idx.resize(opt.max_entries);
    }
    std::vector<double> numeric(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const float saved = t[idx[j]];
      t[idx[j]] = saved + opt.step;
      const double up = eval();
      t[idx[j]] = saved - opt.step;
      const double down = eval();
      t[idx[j]] = saved;
      numeric[j] = (up - down) / (2.0 * opt.step);
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-6, opt.floor_fraction * scale);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double a = analytic[idx[j]];
      const double n = numeric[j];
      const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      ++result.checked;
      if (err > result.max_error) {
        result.max_error = err;
        std::ostringstream os;
        os << "tensor " << ti << " entry " << idx[j] << ": analytic " << a << " numeric " << n;
        result.worst = os.str();
      }
    }
    if (!had_grad[ti]) {
      t.zero_grad();
      t.set_requires_grad(false);
    }
  }
  result.passed = result.max_error < opt.tol;
  return result;
}

/// Checks the adjoint of a tensor-valued function at `input` by projecting
/// its output onto a fixed random direction.
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& op, const Tensor& input,
                                  const GradCheckOptions& opt = {}) {
  Tensor x = input.clone();
  Tensor probe;
  {
    Tape::Pause pause;
    Tensor y = op(x);
    Rng rng(derive_seed(opt.seed, 1));
    probe = Tensor::randn(y.shape(), rng);
  }
  auto loss_fn = [&]() { return sum(mul(op(x), probe)); };
  return grad_check(loss_fn, {x}, opt);
}

inline bool grad_check(const std::function<Tensor(const Tensor&)>& op, const Tensor& input, float tol) {
  GradCheckOptions opt;
  opt.tol = tol;
  return grad_check(op, input, opt).passed;
}

}  // namespace ctformer

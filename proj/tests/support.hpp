// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "omni/config.hpp"
#include "omni/data.hpp"
#include "omni/ops.hpp"
#include "omni/tensor.hpp"

namespace omni::testing {

using TensorD = Tensor<double>;
using Fn = std::function<TensorD(const std::vector<TensorD>&)>;

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline constexpr double kGradFloor = 1e-4;

struct GradReport {
  /// max_i |a_i - n_i| / max(|a_i|, |n_i|, kGradFloor)
  double rel_error = 0;
  double max_abs = 0;
  std::size_t checked = 0;
};

/// Central finite differences of sum(f(inputs) * W) for a fixed random W,
/// against the tape gradient of every input.
inline GradReport gradcheck(const Fn& f, std::vector<TensorD> inputs, std::uint64_t seed = 7,
                            double h = 1e-5) {
  std::mt19937_64 rng(seed);
  TensorD probe;
  {
    NoGradScope<double> ng;
    probe = f(inputs);
  }
  const TensorD weight = random_tensor(probe.shape(), rng, 0.5, 1.5);
  auto loss_of = [&](const TensorD& out) { return sum(mul(out, weight)); };

  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    TensorD loss = loss_of(f(inputs));
    tape.backward(loss);
  }

  GradReport report;
  NoGradScope<double> ng;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto data = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss_of(f(inputs)).item();
      data[i] = keep - h;
      const double down = loss_of(f(inputs)).item();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double d = std::abs(analytic[i] - numeric);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), kGradFloor});
      report.rel_error = std::max(report.rel_error, d / scale);
      report.max_abs = std::max(report.max_abs, d);
      ++report.checked;
    }
  }
  return report;
}

/// Collapse rule: merge repeats, then drop blanks (label 0).
inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != 0) out.push_back(c);
    prev = c;
  }
  return out;
}

/// -log sum over all V^T alignments collapsing to `target`, by enumeration.
inline double ctc_brute_force(const std::vector<std::vector<double>>& log_probs,
                              const std::vector<int>& target) {
  const std::size_t t = log_probs.size(), v = log_probs[0].size();
  std::vector<int> path(t, 0);
  double total = 0;
  while (true) {
    if (collapse(path) == target) {
      double lp = 0;
      for (std::size_t i = 0; i < t; ++i) lp += log_probs[i][static_cast<std::size_t>(path[i])];
      total += std::exp(lp);
    }
    std::size_t k = 0;
    while (k < t && static_cast<std::size_t>(++path[k]) == v) path[k++] = 0;
    if (k == t) break;
  }
  return -std::log(total);
}

/// Random row-normalized log-probabilities [t x v].
inline std::vector<std::vector<double>> random_log_probs(std::size_t t, std::size_t v, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<std::vector<double>> lp(t, std::vector<double>(v));
  for (auto& row : lp) {
    double z = 0;
    for (auto& x : row) {
      x = u(rng);
      z += std::exp(x);
    }
    for (auto& x : row) x -= std::log(z);
  }
  return lp;
}

/// Small synthetic corpus for structural tests: 5 symbols, 8-dim features.
inline SynthSpec tiny_spec(std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.alphabet_size = 5;
  spec.min_tokens = 2;
  spec.max_tokens = 4;
  spec.min_frames_per_token = 3;
  spec.max_frames_per_token = 5;
  spec.feat_dim = 8;
  spec.frame_stack = 2;
  spec.seed = seed;
  return spec;
}

inline ModelConfig tiny_config(Variant variant, std::size_t layers = 2, std::size_t experts = 2) {
  ModelConfig c;
  c.variant = variant;
  c.layers = layers;
  c.embed_dim = 8;
  c.ffn_dim = 12;
  c.heads = 2;
  c.experts = variant == Variant::Dense ? 1 : experts;
  c.vocab_size = 6;
  c.frame_stack = 2;
  c.feat_dim = 8;
  return c;
}

/// First `count` utterances of the tiny corpus as one batch.
inline Batch tiny_batch(std::size_t count = 3, std::uint64_t seed = 3) {
  const Corpus corpus = generate(tiny_spec(seed), count);
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  return make_batch(corpus, idx, Tokenizer::for_alphabet_size(5), 2);
}

}  // namespace omni::testing

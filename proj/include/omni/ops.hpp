// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "omni/tensor.hpp"

// Differentiable operations. Every op records a backward rule on the current
// tape when at least one input requires grad. Shapes must match exactly;
// the only broadcast is add_bias (vector over rows).
namespace omni {

/// A contiguous run of rows [offset, offset + length) in a packed matrix.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// x[R x C] + bias[C], bias added to every row.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// x[R x C] with row i multiplied by s[i].
template <typename T> Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);

/// Softmax over the last axis. -inf entries are allowed (masked logits);
/// NaN or +inf raise NumericError.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// Rows of x selected by idx (repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx);
/// Adjoint of gather_rows: out[idx[k]] += x[k], out has `rows` rows.
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, std::span<const std::size_t> idx,
                           std::size_t rows);
/// out[i] = x[i, idx[i]].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> idx);

/// Entries with mask != 0 are replaced by value and receive no gradient.
template <typename T>
Tensor<T> mask_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Scaled dot-product attention over packed sequences.
///
/// q, k, v are [R x D] with D split into `heads` equal slices. Each segment
/// attends only within itself. Keys whose key_valid entry is 0 get -inf
/// logits; an empty key_valid means all keys are valid. A query row with no
/// valid key produces zeros.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, std::span<const Segment> segments,
                               std::span<const std::uint8_t> key_valid = {});

}  // namespace omni

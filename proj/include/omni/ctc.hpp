// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "omni/data.hpp"
#include "omni/ops.hpp"
#include "omni/tensor.hpp"

namespace omni {

inline constexpr int kBlank = 0;

/// Fewest frames that can emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
std::size_t ctc_min_frames(std::span<const int> target);

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// [T' x V], summed over all alignments with the log-space forward-backward
/// recursion. Differentiable with respect to log_probs. Throws
/// InfeasibleTargetError when T' < ctc_min_frames(target).
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, std::span<const int> target);

/// Same, restricted to a row range of a packed matrix.
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, const Segment& rows, std::span<const int> target);

/// Mean over utterances of the per-utterance loss.
template <typename T>
Tensor<T> ctc_loss_batch(const Tensor<T>& log_probs, std::span<const Segment> segments,
                         std::span<const TokenSeq> targets);

/// Per-frame argmax, merge repeats, drop blanks.
TokenSeq greedy_decode(std::span<const int> frame_labels);
template <typename T>
std::vector<int> frame_argmax(const Tensor<T>& scores, const Segment& rows);
template <typename T>
TokenSeq greedy_decode(const Tensor<T>& scores, const Segment& rows);
template <typename T>
TokenSeq greedy_decode(const Tensor<T>& scores);

/// Lowercase and split on whitespace.
std::vector<std::string> normalize_words(std::string_view text);

/// Levenshtein distance with unit costs.
std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b);

/// edit_distance / |reference|. Throws ContractError on an empty reference.
double wer(std::span<const std::string> reference, std::span<const std::string> hypothesis);

/// Corpus-level error counts, so aggregate WER = errors / words.
struct WerTally {
  std::size_t errors = 0;
  std::size_t words = 0;
  double rate() const { return words ? static_cast<double>(errors) / static_cast<double>(words) : 0.0; }
};

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/ctc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "omni/error.hpp"

namespace omni {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, const Segment& rows, std::span<const int> target) {
  if (log_probs.dim() != 2) throw DimensionError("ctc_loss: log_probs must be a matrix");
  const std::size_t frames = rows.length;
  const std::size_t v = log_probs.cols();
  if (rows.offset + frames > log_probs.rows() || frames == 0) {
    throw IndexError("ctc_loss: row range out of bounds");
  }
  for (int label : target) {
    if (label <= kBlank || static_cast<std::size_t>(label) >= v) {
      throw ContractError("ctc_loss: label " + std::to_string(label) + " outside [1, " +
                          std::to_string(v - 1) + "]");
    }
  }
  if (frames < ctc_min_frames(target)) {
    throw InfeasibleTargetError("ctc_loss: target of length " + std::to_string(target.size()) +
                                " needs " + std::to_string(ctc_min_frames(target)) +
                                " frames, have " + std::to_string(frames));
  }

  // Extended lattice: blank, l1, blank, l2, ..., blank.
  const std::size_t s_len = 2 * target.size() + 1;
  std::vector<int> ext(s_len, kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
  };

  const T* lp = log_probs.data().data() + rows.offset * v;
  auto emit = [&](std::size_t t, std::size_t s) {
    return static_cast<double>(lp[t * v + static_cast<std::size_t>(ext[s])]);
  };

  std::vector<double> alpha(frames * s_len, kNegInf), beta(frames * s_len, kNegInf);
  alpha[0] = emit(0, 0);
  if (s_len > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
      if (a != kNegInf) alpha[t * s_len + s] = a + emit(t, s);
    }
  }
  const std::size_t last = frames - 1;
  beta[last * s_len + s_len - 1] = emit(last, s_len - 1);
  if (s_len > 1) beta[last * s_len + s_len - 2] = emit(last, s_len - 2);
  for (std::size_t t = last; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double b = beta[(t + 1) * s_len + s];
      if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1]);
      if (s + 2 < s_len && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * s_len + s + 2]);
      if (b != kNegInf) beta[t * s_len + s] = b + emit(t, s);
    }
  }
  double log_p = alpha[last * s_len + s_len - 1];
  if (s_len > 1) log_p = log_add(log_p, alpha[last * s_len + s_len - 2]);
  if (!std::isfinite(log_p)) throw NumericError("ctc_loss: zero-probability target");

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-log_p));
  if (Tape<T>::current() != nullptr && log_probs.requires_grad()) {
    auto* X = log_probs.impl();
    auto* O = out.impl();
    // d(-log p)/d lp[t,k] = -sum_{s: ext[s]=k} exp(alpha + beta - lp[t,k] - log p)
    auto grad = std::make_shared<std::vector<T>>(frames * v, T(0));
    std::vector<double> acc(v);
    for (std::size_t t = 0; t < frames; ++t) {
      std::fill(acc.begin(), acc.end(), kNegInf);
      for (std::size_t s = 0; s < s_len; ++s) {
        const double ab = alpha[t * s_len + s] + beta[t * s_len + s];
        auto& slot = acc[static_cast<std::size_t>(ext[s])];
        slot = log_add(slot, ab);
      }
      for (std::size_t k = 0; k < v; ++k) {
        if (acc[k] == kNegInf) continue;
        (*grad)[t * v + k] =
            static_cast<T>(-std::exp(acc[k] - static_cast<double>(lp[t * v + k]) - log_p));
      }
    }
    out.impl()->requires_grad = true;
    out.impl()->is_leaf = false;
    const std::size_t offset = rows.offset * v;
    Tape<T>::current()->record({log_probs.shared_impl()}, out.shared_impl(), [X, O, grad, offset] {
      auto g = X->grad_buffer();
      const T scale = O->grad[0];
      for (std::size_t i = 0; i < grad->size(); ++i) g[offset + i] += scale * (*grad)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, std::span<const int> target) {
  return ctc_loss(log_probs, Segment{0, log_probs.rows()}, target);
}

template <typename T>
Tensor<T> ctc_loss_batch(const Tensor<T>& log_probs, std::span<const Segment> segments,
                         std::span<const TokenSeq> targets) {
  if (segments.size() != targets.size() || segments.empty()) {
    throw ContractError("ctc_loss_batch: " + std::to_string(segments.size()) + " segments for " +
                        std::to_string(targets.size()) + " targets");
  }
  Tensor<T> total;
  for (std::size_t b = 0; b < segments.size(); ++b) {
    Tensor<T> l = ctc_loss(log_probs, segments[b], std::span<const int>(targets[b]));
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T(1) / static_cast<T>(segments.size()));
}

TokenSeq greedy_decode(std::span<const int> frame_labels) {
  TokenSeq out;
  int prev = -1;
  for (int label : frame_labels) {
    if (label != prev && label != kBlank) out.push_back(label);
    prev = label;
  }
  return out;
}

template <typename T>
std::vector<int> frame_argmax(const Tensor<T>& scores, const Segment& rows) {
  const std::size_t v = scores.cols();
  std::vector<int> labels(rows.length);
  auto d = scores.data();
  for (std::size_t t = 0; t < rows.length; ++t) {
    const T* row = d.data() + (rows.offset + t) * v;
    labels[t] = static_cast<int>(std::max_element(row, row + v) - row);
  }
  return labels;
}

template <typename T>
TokenSeq greedy_decode(const Tensor<T>& scores, const Segment& rows) {
  return greedy_decode(std::span<const int>(frame_argmax(scores, rows)));
}

template <typename T>
TokenSeq greedy_decode(const Tensor<T>& scores) {
  return greedy_decode(scores, Segment{0, scores.rows()});
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream is(lower);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(std::span<const std::string> reference, std::span<const std::string> hypothesis) {
  if (reference.empty()) throw ContractError("wer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) /
         static_cast<double>(reference.size());
}

#define OMNI_INSTANTIATE_CTC(T)                                                              \
  template Tensor<T> ctc_loss(const Tensor<T>&, std::span<const int>);                       \
  template Tensor<T> ctc_loss(const Tensor<T>&, const Segment&, std::span<const int>);       \
  template Tensor<T> ctc_loss_batch(const Tensor<T>&, std::span<const Segment>,              \
                                    std::span<const TokenSeq>);                              \
  template std::vector<int> frame_argmax(const Tensor<T>&, const Segment&);                  \
  template TokenSeq greedy_decode(const Tensor<T>&, const Segment&);                         \
  template TokenSeq greedy_decode(const Tensor<T>&);

OMNI_INSTANTIATE_CTC(float)
OMNI_INSTANTIATE_CTC(double)

}  // namespace omni

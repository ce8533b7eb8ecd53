// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "omni/config.hpp"
#include "omni/ops.hpp"
#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

enum class RouterMode { PerLayer, Shared };

/// Bias-free linear map D -> N followed by a softmax over experts.
template <typename T>
struct Router {
  Tensor<T> weight;  // [D x N]
  RouterMode mode = RouterMode::PerLayer;

  std::size_t experts() const { return weight.cols(); }
};

/// Two-layer gelu FFN. Also the dense-model feed-forward sublayer.
template <typename T>
struct Expert {
  Tensor<T> w1;  // [D x F]
  Tensor<T> b1;  // [F]
  Tensor<T> w2;  // [F x D]
  Tensor<T> b2;  // [D]

  Tensor<T> forward(const Tensor<T>& x) const {
    return add_bias(matmul(gelu(add_bias(matmul(x, w1), b1)), w2), b2);
  }
};

template <typename T>
struct MoELayer {
  std::shared_ptr<Router<T>> router;  // shared across layers in omni mode
  std::vector<Expert<T>> experts;
  std::size_t layer_index = 0;
};

/// Outcome of routing T tokens through one router.
template <typename T>
struct DispatchResult {
  std::vector<std::size_t> assignment;  // expert per token
  Tensor<T> gates;                      // [T], probs[i, assignment[i]], differentiable
  Tensor<T> probs;                      // [T x N]
  std::size_t layer_index = 0;
  std::size_t expert_evaluations = 0;   // token-expert FFN evaluations performed
  std::size_t perturbed = 0;            // tokens whose expert was reassigned

  std::size_t tokens() const { return assignment.size(); }
  std::size_t experts() const { return probs.cols(); }
};

/// Random expert reassignment used by the specialization probe. Each token's
/// expert is, with probability p, replaced by a uniform draw over all experts
/// (or over the other experts when exclude_original is set).
struct RoutePerturbation {
  double p = 0.0;
  Rng* rng = nullptr;
  bool exclude_original = false;
};

struct MoEOptions {
  const RoutePerturbation* perturb = nullptr;
  /// Treat the gate as a constant in backward. Test hook for the gate path.
  bool stop_gate_gradient = false;
};

/// Index of the row maximum; ties go to the lowest index.
template <typename T>
std::size_t argmax_row(std::span<const T> row);

template <typename T>
DispatchResult<T> route(const Router<T>& router, const Tensor<T>& x,
                        const RoutePerturbation* perturb = nullptr);

/// Top-1 combination: out[i] = gate[i] * E_{assignment[i]}(x[i]).
template <typename T>
std::pair<Tensor<T>, DispatchResult<T>> moe_forward(const MoELayer<T>& layer, const Tensor<T>& x,
                                                    const MoEOptions& options = {});

/// Sum over layers of N * sum_j f_j * rho_j. f (dispatch fractions) is a
/// constant; rho (mean winning probability) carries the gradient.
template <typename T>
Tensor<T> load_balance_loss(std::span<const DispatchResult<T>> dispatches, std::size_t experts);

/// Dispatch fractions f_j for one layer.
template <typename T>
std::vector<double> expert_fractions(const DispatchResult<T>& dispatch);

/// Router weights in the model: L*D*N with per-layer routers, D*N when shared.
std::size_t router_param_count(const ModelConfig& config);

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/moe.hpp"

#include <random>
#include <string>

#include "omni/error.hpp"

namespace omni {

template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

template <typename T>
DispatchResult<T> route(const Router<T>& router, const Tensor<T>& x,
                        const RoutePerturbation* perturb) {
  if (x.dim() != 2 || x.cols() != router.weight.rows()) {
    throw DimensionError("route: tokens " + shape_str(x.shape()) + " vs router " +
                         shape_str(router.weight.shape()));
  }
  DispatchResult<T> d;
  d.probs = softmax(matmul(x, router.weight));
  const std::size_t n = router.experts();
  const std::size_t t = x.rows();
  d.assignment.resize(t);
  auto p = d.probs.data();
  for (std::size_t i = 0; i < t; ++i)
    d.assignment[i] = argmax_row<T>(p.subspan(i * n, n));

  if (perturb != nullptr && perturb->p > 0.0) {
    if (perturb->rng == nullptr) throw ContractError("route: perturbation without rng");
    // Two draws per token regardless of outcome, so trials at different p
    // share their random numbers and the flipped sets are nested.
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const std::size_t span = perturb->exclude_original && n > 1 ? n - 2 : n - 1;
    for (std::size_t i = 0; i < t; ++i) {
      const double u = coin(*perturb->rng);
      std::size_t e = std::uniform_int_distribution<std::size_t>(0, span)(*perturb->rng);
      if (u >= perturb->p) continue;
      if (perturb->exclude_original && n > 1 && e >= d.assignment[i]) ++e;
      if (e != d.assignment[i]) ++d.perturbed;
      d.assignment[i] = e;
    }
  }
  d.gates = pick(d.probs, std::span<const std::size_t>(d.assignment));
  return d;
}

template <typename T>
std::pair<Tensor<T>, DispatchResult<T>> moe_forward(const MoELayer<T>& layer, const Tensor<T>& x,
                                                    const MoEOptions& options) {
  if (!layer.router) throw ContractError("moe_forward: layer has no router");
  if (layer.router->experts() != layer.experts.size()) {
    throw DimensionError("moe_forward: router has " + std::to_string(layer.router->experts()) +
                         " outputs for " + std::to_string(layer.experts.size()) + " experts");
  }
  DispatchResult<T> d = route(*layer.router, x, options.perturb);
  d.layer_index = layer.layer_index;
  const std::size_t t = x.rows();

  std::vector<std::vector<std::size_t>> rows(layer.experts.size());
  for (std::size_t i = 0; i < t; ++i) rows[d.assignment[i]].push_back(i);

  // Combination over the selected set, which has one member per token.
  Tensor<T> combined;
  for (std::size_t j = 0; j < layer.experts.size(); ++j) {
    if (rows[j].empty()) continue;
    Tensor<T> xj = gather_rows(x, std::span<const std::size_t>(rows[j]));
    Tensor<T> yj = layer.experts[j].forward(xj);
    d.expert_evaluations += rows[j].size();
    Tensor<T> placed = scatter_add_rows(yj, std::span<const std::size_t>(rows[j]), t);
    combined = combined.defined() ? add(combined, placed) : placed;
  }
  Tensor<T> gate = options.stop_gate_gradient ? d.gates.detach() : d.gates;
  return {row_scale(combined, gate), std::move(d)};
}

template <typename T>
std::vector<double> expert_fractions(const DispatchResult<T>& dispatch) {
  std::vector<double> f(dispatch.experts(), 0.0);
  for (std::size_t e : dispatch.assignment) f[e] += 1.0;
  for (auto& v : f) v /= static_cast<double>(dispatch.tokens());
  return f;
}

template <typename T>
Tensor<T> load_balance_loss(std::span<const DispatchResult<T>> dispatches, std::size_t experts) {
  if (dispatches.empty()) throw ContractError("load_balance_loss: no dispatches");
  Tensor<T> total;
  for (const auto& d : dispatches) {
    if (d.tokens() == 0) throw ContractError("load_balance_loss: empty token set");
    if (d.experts() != experts) {
      throw ContractError("load_balance_loss: dispatch has " + std::to_string(d.experts()) +
                          " experts, expected " + std::to_string(experts));
    }
    const auto f = expert_fractions(d);
    // N * sum_j f_j * rho_j = N * mean_i(f_{a_i} * gate_i)
    std::vector<T> weight(d.tokens());
    for (std::size_t i = 0; i < d.tokens(); ++i) weight[i] = static_cast<T>(f[d.assignment[i]]);
    Tensor<T> layer = scale(mean(mul(d.gates, Tensor<T>::from({d.tokens()}, std::move(weight)))),
                            static_cast<T>(experts));
    total = total.defined() ? add(total, layer) : layer;
  }
  return total;
}

std::size_t router_param_count(const ModelConfig& config) {
  switch (config.variant) {
    case Variant::Switch:
      return config.layers * config.embed_dim * config.experts;
    case Variant::Omni:
      return config.embed_dim * config.experts;
    case Variant::Dense:
      break;
  }
  throw ContractError("router_param_count: dense model has no router");
}

#define OMNI_INSTANTIATE_MOE(T)                                                              \
  template std::size_t argmax_row<T>(std::span<const T>);                                    \
  template DispatchResult<T> route(const Router<T>&, const Tensor<T>&,                       \
                                   const RoutePerturbation*);                                \
  template std::pair<Tensor<T>, DispatchResult<T>> moe_forward(                              \
      const MoELayer<T>&, const Tensor<T>&, const MoEOptions&);                              \
  template std::vector<double> expert_fractions(const DispatchResult<T>&);                   \
  template Tensor<T> load_balance_loss(std::span<const DispatchResult<T>>, std::size_t);

OMNI_INSTANTIATE_MOE(float)
OMNI_INSTANTIATE_MOE(double)

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omni/config.hpp"
#include "omni/data.hpp"
#include "omni/moe.hpp"
#include "omni/ops.hpp"
#include "omni/tensor.hpp"

namespace omni {

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out], may be null

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }
};

/// Multi-head self-attention with input/output projections.
template <typename T>
struct SelfAttention {
  Linear<T> query, key, value, output;
  std::size_t heads = 1;

  /// Packed rows; each segment is an independent sequence.
  Tensor<T> forward(const Tensor<T>& x, std::span<const Segment> segments,
                    std::span<const std::uint8_t> key_valid = {}) const;
  /// Single sequence; mask marks valid positions.
  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> mask) const;
};

/// Pre-LN block: x + attn(ln(x)), then x + ffn(ln(x)).
template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln_attn;
  SelfAttention<T> attn;
  LayerNorm<T> ln_ffn;
  std::optional<Expert<T>> ffn;    // dense variant
  std::optional<MoELayer<T>> moe;  // switch / omni
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

struct ForwardOptions {
  const RoutePerturbation* perturb = nullptr;
  bool stop_gate_gradient = false;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;               // packed [sum T'_b x V]
  std::vector<Segment> segments;  // rows belonging to each utterance
  std::vector<DispatchResult<T>> dispatches;  // one per MoE layer, in depth order
};

/// Fixed sinusoidal position code for positions [0, length).
std::vector<double> sinusoidal_positions(std::size_t length, std::size_t dim);

template <typename T>
class Model {
 public:
  /// Seed-deterministic construction. Dense blocks get a plain FFN; switch
  /// blocks each own a router; omni blocks all reference one router.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Frame stacking, projection, positions, blocks, final norm, vocabulary
  /// projection. Only the first lengths[b] frames of each utterance are read.
  ForwardResult<T> forward(const Batch& batch, const ForwardOptions& options = {}) const;

  /// Every distinct parameter tensor once, in a stable order.
  std::vector<NamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;
  /// Router tensors that exist (1 for omni, L for switch, 0 for dense).
  std::size_t router_tensor_count() const;

  std::vector<EncoderBlock<T>>& blocks() { return blocks_; }
  const std::vector<EncoderBlock<T>>& blocks() const { return blocks_; }
  const std::shared_ptr<Router<T>>& shared_router() const { return shared_router_; }

  /// Copies values by name from another model with an identical config.
  void copy_parameters_from(const Model& other);
  /// Deep copy; shared-router aliasing is preserved in the copy.
  Model clone() const;

  void zero_grad();

 private:
  ModelConfig config_;
  Linear<T> frontend_;
  std::vector<EncoderBlock<T>> blocks_;
  std::shared_ptr<Router<T>> shared_router_;
  LayerNorm<T> final_norm_;
  Tensor<T> head_;  // [D x V], bias-free
};

// Checkpoint: "OMNI", u32 version, u32 config fields, u32 parameter count,
// then per parameter: u32 name length, name bytes, u32 rank, u32 dims,
// raw little-endian f32 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model);
Model<float> load_checkpoint(const std::filesystem::path& path);
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace omni

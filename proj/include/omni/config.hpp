// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace omni {

enum class Variant { Dense, Switch, Omni };

std::string to_string(Variant v);
/// Accepts "dense", "switch", "omni"; throws ConfigError("variant") otherwise.
Variant parse_variant(std::string_view name);

/// Architecture descriptor shared by all three encoder families.
struct ModelConfig {
  Variant variant = Variant::Dense;
  std::size_t layers = 4;
  std::size_t embed_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t heads = 4;
  std::size_t experts = 1;
  std::size_t vocab_size = 17;
  std::size_t frame_stack = 4;
  std::size_t feat_dim = 80;

  bool is_moe() const { return variant != Variant::Dense; }
  std::size_t stacked_dim() const { return feat_dim * frame_stack; }

  /// Throws ConfigError naming the first offending field. MoE variants accept
  /// a single expert (degenerate but well defined); dense requires exactly 1.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace omni

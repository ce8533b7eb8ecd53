// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/config.hpp"

#include "omni/error.hpp"

namespace omni {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Dense:
      return "dense";
    case Variant::Switch:
      return "switch";
    case Variant::Omni:
      return "omni";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "dense") return Variant::Dense;
  if (name == "switch") return Variant::Switch;
  if (name == "omni") return Variant::Omni;
  throw ConfigError("variant", "unknown variant '" + std::string(name) +
                                   "' (expected dense, switch or omni)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(field, std::string(field) + " must be positive");
  };
  positive(layers, "layers");
  positive(embed_dim, "embed_dim");
  positive(ffn_dim, "ffn_dim");
  positive(heads, "heads");
  positive(experts, "experts");
  positive(vocab_size, "vocab_size");
  positive(frame_stack, "frame_stack");
  positive(feat_dim, "feat_dim");
  if (embed_dim % heads != 0) {
    throw ConfigError("heads", "embed_dim " + std::to_string(embed_dim) +
                                   " is not divisible by heads " + std::to_string(heads));
  }
  if (variant == Variant::Dense && experts != 1) {
    throw ConfigError("experts", "dense variant requires experts=1, got " +
                                     std::to_string(experts));
  }
  if (vocab_size < 2) throw ConfigError("vocab_size", "vocab_size must include blank and a symbol");
}

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "omni/encoder.hpp"

namespace omni {

namespace {

ModelConfig read_config(io::Reader& r) {
  r.magic("OMNI");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t variant = r.u32();
  if (variant > 2) throw IntegrityError("checkpoint: bad variant code");
  ModelConfig c;
  c.variant = static_cast<Variant>(variant);
  c.layers = r.u32();
  c.embed_dim = r.u32();
  c.ffn_dim = r.u32();
  c.heads = r.u32();
  c.experts = r.u32();
  c.vocab_size = r.u32();
  c.frame_stack = r.u32();
  c.feat_dim = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint: invalid config: ") + e.what());
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  const auto& c = model.config();
  os.write("OMNI", 4);
  io::put_u32(os, kCheckpointVersion);
  io::put_u32(os, static_cast<std::uint32_t>(c.variant));
  for (std::size_t v : {c.layers, c.embed_dim, c.ffn_dim, c.heads, c.experts, c.vocab_size,
                        c.frame_stack, c.feat_dim})
    io::put_u32(os, static_cast<std::uint32_t>(v));
  const auto params = model.parameters();
  io::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    io::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    io::put_bytes(os, p.name);
    io::put_u32(os, static_cast<std::uint32_t>(p.tensor.dim()));
    for (std::size_t d : p.tensor.shape()) io::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) io::put_f32(os, v);
  }
  if (!os) throw FormatError("checkpoint: write failed for " + path.string());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  io::Reader r(is, "checkpoint " + path.string());
  return read_config(r);
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  io::Reader r(is, "checkpoint " + path.string());
  const ModelConfig config = read_config(r);
  Model<float> model = Model<float>::build(config, 0);
  std::map<std::string, Tensor<float>> expected;
  for (auto& p : model.parameters()) expected.emplace(p.name, p.tensor);

  const std::uint32_t count = r.u32();
  if (count != expected.size()) {
    throw IntegrityError("checkpoint: " + std::to_string(count) + " tensors, config implies " +
                         std::to_string(expected.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) throw IntegrityError("checkpoint: implausible name length");
    const std::string name = r.str(name_len);
    auto it = expected.find(name);
    if (it == expected.end()) throw IntegrityError("checkpoint: unexpected tensor " + name);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank && k < 8; ++k) shape.push_back(r.u32());
    if (shape != it->second.shape()) {
      throw IntegrityError("checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                           ", config implies " + shape_str(it->second.shape()));
    }
    for (auto& v : it->second.data()) v = r.f32();
    expected.erase(it);
  }
  if (!r.at_end()) throw IntegrityError("checkpoint: trailing bytes");
  return model;
}

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/encoder.hpp"

#include <cmath>
#include <map>
#include <random>

#include "omni/error.hpp"
#include "omni/rng.hpp"

namespace omni {

namespace {

template <typename T>
Tensor<T> uniform_init(std::uint64_t seed, const std::string& name, Shape shape,
                       std::size_t fan_in) {
  Rng rng = make_stream(seed, "init:" + name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values)).set_requires_grad();
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value).set_requires_grad();
}

template <typename T>
Linear<T> make_linear(std::uint64_t seed, const std::string& name, std::size_t in,
                      std::size_t out, bool bias) {
  Linear<T> l;
  l.weight = uniform_init<T>(seed, name + ".weight", {in, out}, in);
  if (bias) l.bias = constant_param<T>({out}, T(0));
  return l;
}

template <typename T>
LayerNorm<T> make_norm(std::size_t dim) {
  return {constant_param<T>({dim}, T(1)), constant_param<T>({dim}, T(0))};
}

template <typename T>
Expert<T> make_expert(std::uint64_t seed, const std::string& name, std::size_t d, std::size_t f) {
  Expert<T> e;
  e.w1 = uniform_init<T>(seed, name + ".w1", {d, f}, d);
  e.b1 = constant_param<T>({f}, T(0));
  e.w2 = uniform_init<T>(seed, name + ".w2", {f, d}, f);
  e.b2 = constant_param<T>({d}, T(0));
  return e;
}

template <typename T>
void push_linear(std::vector<NamedParameter<T>>& out, const std::string& name, const Linear<T>& l) {
  out.push_back({name + ".weight", l.weight});
  if (l.bias.defined()) out.push_back({name + ".bias", l.bias});
}

template <typename T>
void push_norm(std::vector<NamedParameter<T>>& out, const std::string& name,
               const LayerNorm<T>& n) {
  out.push_back({name + ".gain", n.gain});
  out.push_back({name + ".bias", n.bias});
}

template <typename T>
void push_expert(std::vector<NamedParameter<T>>& out, const std::string& name, const Expert<T>& e) {
  out.push_back({name + ".w1", e.w1});
  out.push_back({name + ".b1", e.b1});
  out.push_back({name + ".w2", e.w2});
  out.push_back({name + ".b2", e.b2});
}

}  // namespace

std::vector<double> sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<double> pe(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe[pos * dim + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < dim) pe[pos * dim + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& x, std::span<const Segment> segments,
                                    std::span<const std::uint8_t> key_valid) const {
  Tensor<T> ctx = multi_head_attention(query.forward(x), key.forward(x), value.forward(x), heads,
                                       segments, key_valid);
  return output.forward(ctx);
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& x, std::span<const std::uint8_t> mask) const {
  const Segment whole{0, x.rows()};
  return forward(x, std::span<const Segment>(&whole, 1), mask);
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  const std::size_t d = config.embed_dim;
  const std::size_t n = config.experts;
  m.frontend_ = make_linear<T>(seed, "frontend", config.stacked_dim(), d, true);
  if (config.variant == Variant::Omni) {
    m.shared_router_ = std::make_shared<Router<T>>();
    m.shared_router_->weight = uniform_init<T>(seed, "router.shared", {d, n}, d);
    m.shared_router_->mode = RouterMode::Shared;
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l);
    EncoderBlock<T> b;
    b.ln_attn = make_norm<T>(d);
    b.attn.query = make_linear<T>(seed, p + ".attn.query", d, d, true);
    b.attn.key = make_linear<T>(seed, p + ".attn.key", d, d, true);
    b.attn.value = make_linear<T>(seed, p + ".attn.value", d, d, true);
    b.attn.output = make_linear<T>(seed, p + ".attn.output", d, d, true);
    b.attn.heads = config.heads;
    b.ln_ffn = make_norm<T>(d);
    if (!config.is_moe()) {
      b.ffn = make_expert<T>(seed, p + ".ffn", d, config.ffn_dim);
    } else {
      MoELayer<T> moe;
      moe.layer_index = l;
      if (config.variant == Variant::Omni) {
        moe.router = m.shared_router_;
      } else {
        moe.router = std::make_shared<Router<T>>();
        moe.router->weight = uniform_init<T>(seed, p + ".moe.router", {d, n}, d);
      }
      for (std::size_t j = 0; j < n; ++j)
        moe.experts.push_back(
            make_expert<T>(seed, p + ".moe.experts." + std::to_string(j), d, config.ffn_dim));
      b.moe = std::move(moe);
    }
    m.blocks_.push_back(std::move(b));
  }
  m.final_norm_ = make_norm<T>(d);
  m.head_ = uniform_init<T>(seed, "head.weight", {d, config.vocab_size}, d);
  return m;
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Batch& batch, const ForwardOptions& options) const {
  if (batch.feat_dim != config_.feat_dim) {
    throw DimensionError("forward: batch has feat_dim " + std::to_string(batch.feat_dim) +
                         ", model expects " + std::to_string(config_.feat_dim));
  }
  if (batch.size() == 0) throw ContractError("forward: empty batch");
  const std::size_t stack = config_.frame_stack;
  const std::size_t f = config_.feat_dim;
  const std::size_t d = config_.embed_dim;
  const std::size_t width = stack * f;

  ForwardResult<T> result;
  std::size_t rows = 0, longest = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch.lengths[b] == 0) throw ContractError("forward: utterance with zero frames");
    const std::size_t len = stacked_length(batch.lengths[b], stack);
    result.segments.push_back({rows, len});
    rows += len;
    longest = std::max(longest, len);
  }

  std::vector<T> stacked(rows * width, T(0));
  std::vector<T> positions(rows * d);
  const std::vector<double> pe = sinusoidal_positions(longest, d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto feats = batch.utterance(b);
    const auto& seg = result.segments[b];
    for (std::size_t t = 0; t < seg.length; ++t) {
      T* row = stacked.data() + (seg.offset + t) * width;
      for (std::size_t s = 0; s < stack; ++s) {
        const std::size_t frame = t * stack + s;
        if (frame >= batch.lengths[b]) break;
        for (std::size_t k = 0; k < f; ++k) row[s * f + k] = static_cast<T>(feats[frame * f + k]);
      }
      for (std::size_t k = 0; k < d; ++k)
        positions[(seg.offset + t) * d + k] = static_cast<T>(pe[t * d + k]);
    }
  }

  Tensor<T> x = frontend_.forward(Tensor<T>::from({rows, width}, std::move(stacked)));
  x = add(x, Tensor<T>::from({rows, d}, std::move(positions)));
  const std::span<const Segment> segs(result.segments);
  for (const auto& block : blocks_) {
    x = add(x, block.attn.forward(block.ln_attn.forward(x), segs));
    Tensor<T> h = block.ln_ffn.forward(x);
    if (block.ffn) {
      x = add(x, block.ffn->forward(h));
    } else {
      MoEOptions mo{options.perturb, options.stop_gate_gradient};
      auto [y, dispatch] = moe_forward(*block.moe, h, mo);
      x = add(x, y);
      result.dispatches.push_back(std::move(dispatch));
    }
  }
  result.logits = matmul(final_norm_.forward(x), head_);
  return result;
}

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  push_linear(out, "frontend", frontend_);
  if (shared_router_) out.push_back({"router.shared", shared_router_->weight});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l);
    push_norm(out, p + ".ln_attn", b.ln_attn);
    push_linear(out, p + ".attn.query", b.attn.query);
    push_linear(out, p + ".attn.key", b.attn.key);
    push_linear(out, p + ".attn.value", b.attn.value);
    push_linear(out, p + ".attn.output", b.attn.output);
    push_norm(out, p + ".ln_ffn", b.ln_ffn);
    if (b.ffn) push_expert(out, p + ".ffn", *b.ffn);
    if (b.moe) {
      if (b.moe->router->mode == RouterMode::PerLayer)
        out.push_back({p + ".moe.router", b.moe->router->weight});
      for (std::size_t j = 0; j < b.moe->experts.size(); ++j)
        push_expert(out, p + ".moe.experts." + std::to_string(j), b.moe->experts[j]);
    }
  }
  push_norm(out, "final_norm", final_norm_);
  out.push_back({"head.weight", head_});
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
std::size_t Model<T>::router_tensor_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p.name.find("router") != std::string::npos) ++n;
  return n;
}

template <typename T>
void Model<T>::copy_parameters_from(const Model& other) {
  if (!(other.config_ == config_)) {
    throw IntegrityError("copy_parameters_from: model configs differ");
  }
  std::map<std::string, Tensor<T>> src;
  for (auto& p : other.parameters()) src.emplace(p.name, p.tensor);
  for (auto& p : parameters()) {
    auto it = src.find(p.name);
    if (it == src.end() || it->second.shape() != p.tensor.shape()) {
      throw IntegrityError("copy_parameters_from: no matching tensor for " + p.name);
    }
    auto dst = p.tensor.data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  }
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model m = build(config_, 0);
  m.copy_parameters_from(*this);
  return m;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template struct SelfAttention<float>;
template struct SelfAttention<double>;
template class Model<float>;
template class Model<double>;

}  // namespace omni

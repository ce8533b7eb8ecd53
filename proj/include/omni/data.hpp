// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "omni/rng.hpp"

namespace omni {

/// Label sequence over [1, V-1]; 0 is the CTC blank.
using TokenSeq = std::vector<int>;

/// Parameters of the synthetic speech-like corpus.
///
/// Every alphabet symbol owns a fixed unit-norm feature template. An utterance
/// is a random symbol string in which each symbol is rendered as a block of
/// identical template frames (perturbed once per block by template noise) plus
/// independent per-frame channel noise. The last alphabet symbol is the word
/// separator ' '; it never starts or ends an utterance. Adjacent symbols always
/// differ once the alphabet has two or more letters.
struct SynthSpec {
  std::size_t alphabet_size = 16;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  std::size_t min_frames_per_token = 8;
  std::size_t max_frames_per_token = 12;
  std::size_t feat_dim = 80;
  double template_noise_sigma = 0.0;
  double channel_noise_sigma = 0.1;
  double space_prob = 0.25;
  std::size_t frame_stack = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Utterance {
  std::string id;
  std::size_t frames = 0;
  std::size_t feat_dim = 0;
  std::vector<float> features;  // row-major frames x feat_dim
  std::string transcript;

  std::span<const float> frame(std::size_t t) const {
    return std::span<const float>(features).subspan(t * feat_dim, feat_dim);
  }
  bool operator==(const Utterance&) const = default;
};

using Corpus = std::vector<Utterance>;

/// Corpus plus the ground-truth symbol index of every frame.
struct Rendering {
  Corpus corpus;
  std::vector<std::vector<int>> frame_symbols;  // index into the alphabet
};

/// Characters of the synthetic alphabet: the first alphabet_size-1 lowercase
/// letters followed by ' '.
std::string synth_alphabet(std::size_t alphabet_size);

/// Unit-norm template per alphabet symbol, [alphabet_size][feat_dim].
std::vector<std::vector<float>> symbol_templates(const SynthSpec& spec);

Rendering render(const SynthSpec& spec, std::size_t count);
Corpus generate(const SynthSpec& spec, std::size_t count);

/// Bijective character <-> id map; id 0 is reserved for the CTC blank.
class Tokenizer {
 public:
  explicit Tokenizer(std::string alphabet);
  static Tokenizer for_alphabet_size(std::size_t alphabet_size) {
    return Tokenizer(synth_alphabet(alphabet_size));
  }

  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const int> tokens) const;
  std::size_t vocab_size() const { return alphabet_.size() + 1; }
  const std::string& alphabet() const { return alphabet_; }

 private:
  std::string alphabet_;
  int index_[256];
};

// Corpus IO. Layout under a directory:
//   manifest.tsv         id \t relative path \t frames \t transcript
//   feats/<id>.feat      "FEAT", u32 version, u32 frames, u32 feat_dim, f32 data
inline constexpr std::uint32_t kFeatVersion = 1;

void write_feat_file(const std::filesystem::path& path, const Utterance& utt);
/// Reads a FEAT file into utt.features/frames/feat_dim.
void read_feat_file(const std::filesystem::path& path, Utterance& utt);

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

/// Padded minibatch ready for the encoder.
struct Batch {
  std::size_t feat_dim = 0;
  std::size_t max_frames = 0;
  std::vector<float> features;  // [size() x max_frames x feat_dim], zero padded
  std::vector<std::size_t> lengths;
  std::vector<TokenSeq> targets;
  std::vector<std::string> ids;

  std::size_t size() const { return lengths.size(); }
  std::span<const float> utterance(std::size_t b) const {
    return std::span<const float>(features).subspan(b * max_frames * feat_dim,
                                                    lengths[b] * feat_dim);
  }
  std::span<float> utterance_mut(std::size_t b) {
    return std::span<float>(features).subspan(b * max_frames * feat_dim, lengths[b] * feat_dim);
  }
};

/// Stacked sequence length entering the encoder.
inline std::size_t stacked_length(std::size_t frames, std::size_t frame_stack) {
  return (frames + frame_stack - 1) / frame_stack;
}

/// Builds one batch from the selected utterances. Throws
/// InfeasibleTargetError when a target cannot be aligned after stacking.
Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                 const Tokenizer& tokenizer, std::size_t frame_stack);

/// Greedy packing in the given order: utterances are appended to the current
/// batch until its total frame count would exceed max_frames.
std::vector<std::vector<std::size_t>> pack_batches(const Corpus& corpus,
                                                   std::span<const std::size_t> order,
                                                   std::size_t max_frames);

/// Deterministic split: the last `heldout` fraction of ids (by position).
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double heldout_fraction);

}  // namespace omni

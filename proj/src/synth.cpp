// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <random>

#include "omni/data.hpp"
#include "omni/error.hpp"

namespace omni {

void SynthSpec::validate() const {
  if (alphabet_size < 2 || alphabet_size > 27)
    throw ConfigError("alphabet_size", "alphabet_size must be in [2, 27]");
  if (min_tokens == 0 || max_tokens < min_tokens)
    throw ConfigError("min_tokens", "need 0 < min_tokens <= max_tokens");
  if (min_frames_per_token == 0 || max_frames_per_token < min_frames_per_token)
    throw ConfigError("min_frames_per_token",
                      "need 0 < min_frames_per_token <= max_frames_per_token");
  if (feat_dim == 0) throw ConfigError("feat_dim", "feat_dim must be positive");
  if (frame_stack == 0) throw ConfigError("frame_stack", "frame_stack must be positive");
  if (template_noise_sigma < 0) throw ConfigError("template_noise_sigma", "sigma must be >= 0");
  if (channel_noise_sigma < 0) throw ConfigError("channel_noise_sigma", "sigma must be >= 0");
  if (space_prob < 0 || space_prob > 1) throw ConfigError("space_prob", "space_prob must be in [0, 1]");
  // Every utterance length must admit durations long enough for the blank lattice.
  for (std::size_t n = min_tokens; n <= max_tokens; ++n) {
    if (stacked_length(n * max_frames_per_token, frame_stack) < 2 * n + 1)
      throw ConfigError("max_frames_per_token",
                        "durations too short for CTC feasibility after frame stacking");
  }
}

std::string synth_alphabet(std::size_t alphabet_size) {
  if (alphabet_size < 2 || alphabet_size > 27)
    throw ConfigError("alphabet_size", "alphabet_size must be in [2, 27]");
  std::string a;
  for (std::size_t i = 0; i + 1 < alphabet_size; ++i) a.push_back(static_cast<char>('a' + i));
  a.push_back(' ');
  return a;
}

std::vector<std::vector<float>> symbol_templates(const SynthSpec& spec) {
  Rng rng = make_stream(spec.seed, "templates");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<float>> out(spec.alphabet_size, std::vector<float>(spec.feat_dim));
  for (auto& t : out) {
    std::vector<double> v(spec.feat_dim);
    double norm = 0;
    for (auto& x : v) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < v.size(); ++k) t[k] = static_cast<float>(v[k] / norm);
  }
  return out;
}

Rendering render(const SynthSpec& spec, std::size_t count) {
  spec.validate();
  const auto templates = symbol_templates(spec);
  const std::string alphabet = synth_alphabet(spec.alphabet_size);
  const std::size_t space = spec.alphabet_size - 1;
  const std::size_t letters = spec.alphabet_size - 1;

  Rendering r;
  r.corpus.reserve(count);
  r.frame_symbols.reserve(count);
  for (std::size_t u = 0; u < count; ++u) {
    Rng rng = make_stream(spec.seed, "utterance", u);
    std::uniform_int_distribution<std::size_t> n_tokens(spec.min_tokens, spec.max_tokens);
    std::uniform_int_distribution<std::size_t> letter(0, letters - 1);
    std::uniform_int_distribution<std::size_t> other_letter(0, letters - 2);
    std::bernoulli_distribution use_space(spec.space_prob);
    std::uniform_int_distribution<std::size_t> duration(spec.min_frames_per_token,
                                                        spec.max_frames_per_token);
    std::normal_distribution<double> normal(0.0, 1.0);

    const std::size_t n = n_tokens(rng);
    std::vector<std::size_t> symbols;
    for (std::size_t i = 0; i < n; ++i) {
      const bool interior = i > 0 && i + 1 < n && symbols.back() != space;
      if (interior && use_space(rng)) {
        symbols.push_back(space);
      } else if (i > 0 && symbols.back() != space && letters > 1) {
        // Identical adjacent blocks would have no boundary to hear.
        const std::size_t pick = other_letter(rng);
        symbols.push_back(pick >= symbols.back() ? pick + 1 : pick);
      } else {
        symbols.push_back(letter(rng));
      }
    }

    std::vector<std::size_t> durations(n);
    std::size_t frames = 0;
    for (int attempt = 0;; ++attempt) {
      frames = 0;
      for (auto& d : durations) {
        d = duration(rng);
        frames += d;
      }
      if (stacked_length(frames, spec.frame_stack) >= 2 * n + 1) break;
      if (attempt > 10000) throw ConfigError("max_frames_per_token", "cannot satisfy CTC feasibility");
    }

    Utterance utt;
    char id[32];
    std::snprintf(id, sizeof id, "utt%06zu", u);
    utt.id = id;
    utt.frames = frames;
    utt.feat_dim = spec.feat_dim;
    utt.features.reserve(frames * spec.feat_dim);
    std::vector<int> labels;
    labels.reserve(frames);
    std::vector<double> block(spec.feat_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tmpl = templates[symbols[i]];
      for (std::size_t k = 0; k < spec.feat_dim; ++k) {
        block[k] = tmpl[k];
        if (spec.template_noise_sigma > 0) block[k] += spec.template_noise_sigma * normal(rng);
      }
      for (std::size_t f = 0; f < durations[i]; ++f) {
        for (std::size_t k = 0; k < spec.feat_dim; ++k) {
          double v = block[k];
          if (spec.channel_noise_sigma > 0) v += spec.channel_noise_sigma * normal(rng);
          utt.features.push_back(static_cast<float>(v));
        }
        labels.push_back(static_cast<int>(symbols[i]));
      }
      utt.transcript.push_back(alphabet[symbols[i]]);
    }
    r.corpus.push_back(std::move(utt));
    r.frame_symbols.push_back(std::move(labels));
  }
  return r;
}

Corpus generate(const SynthSpec& spec, std::size_t count) { return render(spec, count).corpus; }

}  // namespace omni

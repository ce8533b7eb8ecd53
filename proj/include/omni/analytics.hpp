// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "omni/data.hpp"
#include "omni/encoder.hpp"

// Routing diagnostics: assignment dumps, inter-layer contingency and
// Cramer's V, label alignment, routing entropy and the expert-permutation
// robustness probe.
namespace omni {

struct RoutingRecord {
  std::string utterance_id;
  std::size_t layer = 0;
  std::size_t frame = 0;  // stacked-frame index
  std::size_t expert = 0;
  double gate = 0;
  std::vector<double> probs;

  bool operator==(const RoutingRecord&) const = default;
};

/// Greedy frame-level symbol (argmax before collapsing) of a stacked frame.
struct FrameLabel {
  std::string utterance_id;
  std::size_t frame = 0;
  int symbol = 0;

  bool operator==(const FrameLabel&) const = default;
};

struct RouteDump {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::vector<RoutingRecord> records;  // ordered by utterance, layer, frame
  std::vector<FrameLabel> frames;      // ordered by utterance, frame

  bool operator==(const RouteDump&) const = default;
};

/// Eval-mode forward over the corpus, one record per (utterance, MoE layer,
/// stacked frame). Throws ContractError for a dense model.
RouteDump dump_routes(const Model<float>& model, const Corpus& corpus, const Tokenizer& tokenizer,
                      std::size_t batch_max_frames);

// routes.csv: utterance_id,layer,frame,expert,gate
// frames.csv: utterance_id,frame,symbol
// probs.csv (optional): utterance_id,layer,frame,p0..p{N-1}
void write_route_dump(const std::filesystem::path& dir, const RouteDump& dump, bool with_probs);
RouteDump read_route_dump(const std::filesystem::path& dir);

struct ContingencyTable {
  std::vector<std::vector<std::size_t>> counts;  // [expert at l][expert at l+1]
  std::size_t layer = 0;                         // pair (layer, layer + 1)
  std::size_t total = 0;
};

/// counts[a][b] = frames routed to a at `layer` and to b at `layer + 1`.
ContingencyTable contingency(std::span<const RoutingRecord> records, std::size_t layer,
                             std::size_t experts);
ContingencyTable contingency_from_assignments(std::span<const std::size_t> first,
                                              std::span<const std::size_t> second,
                                              std::size_t experts, std::size_t layer = 0);

/// Pearson chi-square against the independence model, over non-empty rows
/// and columns.
double chi_square(const ContingencyTable& table);

/// sqrt(chi2 / (total * (k - 1))), k = min(non-empty rows, non-empty
/// columns). Defined as 0 when k == 1.
double cramers_v(const ContingencyTable& table);

/// Permutation sigma maximizing sum_a counts[a][sigma(a)] (Hungarian method).
std::vector<std::size_t> max_trace_permutation(const std::vector<std::vector<std::size_t>>& counts);

/// Per-layer relabeling (raw label -> display label) aligning every layer to
/// the first layer's labels. tables[i] must cover the pair (i, i + 1); the
/// result has tables.size() + 1 entries, the first being the identity.
std::vector<std::vector<std::size_t>> align_labels(std::span<const ContingencyTable> tables);

double entropy_bits(std::span<const double> distribution);

struct EntropyRow {
  int symbol = 0;
  std::size_t frames = 0;            // frames of this group per layer
  std::vector<double> per_layer;     // bits
};

struct EntropyTable {
  std::vector<EntropyRow> groups;    // most frequent first
  std::size_t skipped = 0;           // requested groups that had no frames
};

/// Groups frames by their greedy frame-level symbol and, for the top_k most
/// frequent groups, computes per-layer entropy of the expert distribution.
/// use_probs averages router probabilities instead of counting assignments.
EntropyTable routing_entropy(const RouteDump& dump, std::size_t top_k, bool use_probs = false);

struct PermutationRow {
  double p = 0;
  double mean_wer = 0;
  /// Mean over trials of 100 * (WER_p - WER_0) / WER_0, or of 100 * WER_p
  /// when the baseline WER is zero (see PermutationReport::absolute).
  double mean_change = 0;
  std::vector<double> trial_wers;
};

struct PermutationReport {
  double baseline_wer = 0;
  bool absolute = false;  // baseline WER was 0; changes are absolute WER %
  std::vector<PermutationRow> rows;
};

/// Re-runs decoding with each token's expert reassigned with probability p.
/// Trial t of every p draws from the stream (seed, "permute", t).
PermutationReport permutation_experiment(const Model<float>& model, const Corpus& corpus,
                                         const Tokenizer& tokenizer,
                                         std::span<const double> p_values, std::size_t trials,
                                         std::uint64_t seed, std::size_t batch_max_frames,
                                         bool exclude_original = false);

/// {"layers": L, "utterances": [{"id": ..., "grid": [[label per frame] per layer]}]}
/// with labels mapped through `alignment` when it is non-empty.
std::string usage_map_json(const RouteDump& dump,
                           const std::vector<std::vector<std::size_t>>& alignment);

}  // namespace omni

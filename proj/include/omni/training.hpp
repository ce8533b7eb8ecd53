// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omni/config.hpp"
#include "omni/ctc.hpp"
#include "omni/data.hpp"
#include "omni/encoder.hpp"
#include "omni/error.hpp"
#include "omni/rng.hpp"

namespace omni {

/// Feature masking: frequency bands and time spans set to zero.
struct AugmentConfig {
  std::size_t freq_masks = 2;
  std::size_t freq_width = 30;
  std::size_t time_masks = 2;
  std::size_t time_width = 10;
  double time_ratio = 0.1;

  bool operator==(const AugmentConfig&) const = default;
};

struct TrainConfig {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t cosine_steps = 2000;
  double step_decay_factor = 0.5;
  double clip_norm = 0.1;
  double aux_weight = 10.0;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t max_steps = 1000;
  std::size_t batch_max_frames = 800;
  std::uint64_t seed = 1;
  bool augment_enabled = true;
  AugmentConfig augment;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup to peak, cosine down to peak*step_decay_factor over
/// cosine_steps, then one further multiplication by step_decay_factor every
/// cosine_steps.
double lr_at(std::size_t step, const TrainConfig& config);

struct MaskSpan {
  std::size_t start = 0;
  std::size_t width = 0;
};

struct MaskReport {
  std::vector<MaskSpan> freq;
  std::vector<MaskSpan> time;
  std::size_t masked_cells = 0;  // distinct zeroed cells
};

/// Zeroes freq_masks bands of width U[0, freq_width] and time_masks spans of
/// width U[0, min(time_width, time_ratio * frames)], all clamped to the axes.
MaskReport apply_masking(std::span<float> features, std::size_t frames, std::size_t feat_dim,
                         const AugmentConfig& config, Rng& rng);

template <typename T>
double global_grad_norm(std::span<const NamedParameter<T>> params);

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const NamedParameter<T>> params, double max_norm);

/// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParameter<T>> params, double beta1, double beta2, double eps,
        double weight_decay);

  /// One update at learning rate lr. Parameters without a gradient are
  /// treated as having a zero gradient.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedParameter<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  double lr = 0;
  double ctc_loss = 0;
  double load_balance_loss = 0;
  double total_loss = 0;
  double grad_norm = 0;
  std::vector<std::vector<double>> usage;  // [MoE layer][expert] dispatch fractions

  bool operator==(const TrainRecord&) const = default;
};

class DivergenceError : public Error {
 public:
  DivergenceError(TrainRecord record, std::string term)
      : Error("training diverged at step " + std::to_string(record.step) + " in term '" + term + "'"),
        record_(std::move(record)),
        term_(std::move(term)) {}
  const TrainRecord& record() const { return record_; }
  const std::string& term() const { return term_; }

 private:
  TrainRecord record_;
  std::string term_;
};

/// Append-only per-step log.
class TrainLog {
 public:
  void append(TrainRecord r);
  const std::vector<TrainRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }

  /// Stable columns: step, lr, ctc_loss, load_balance_loss, total_loss,
  /// grad_norm, then f_l<layer>_e<expert> for MoE models.
  void write_csv(std::ostream& os) const;
  void write_csv(const std::string& path) const;

  /// Moving average of ctc_loss over the trailing window.
  std::vector<double> smoothed_ctc(std::size_t window) const;
  double final_smoothed_ctc(std::size_t window) const;

 private:
  std::vector<TrainRecord> records_;
};

/// Owns the optimizer state for one model.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig config);

  /// total = ctc + aux_weight * load_balance (MoE only); backward; clip;
  /// AdamW. Augmentation draws from the stream (seed, "augment", step).
  /// Throws DivergenceError on a non-finite loss or gradient.
  TrainRecord step(const Batch& batch, std::size_t step_index);

  const TrainConfig& config() const { return config_; }

 private:
  Model<T>& model_;
  TrainConfig config_;
  std::vector<NamedParameter<T>> params_;
  AdamW<T> optimizer_;
};

struct UtteranceResult {
  std::string id;
  std::string reference;
  std::string hypothesis;
  std::size_t errors = 0;
  std::size_t words = 0;
};

struct EvalResult {
  std::vector<UtteranceResult> utterances;
  WerTally tally;
  double wer() const { return tally.rate(); }
};

/// Greedy-decode WER of a corpus, in corpus order, without augmentation.
template <typename T>
EvalResult evaluate(const Model<T>& model, const Corpus& corpus, const Tokenizer& tokenizer,
                    std::size_t batch_max_frames, const ForwardOptions& options = {});

struct ExperimentData {
  Corpus train;
  Corpus heldout;
  Tokenizer tokenizer;
};

struct VariantReport {
  ModelConfig model_config;
  TrainConfig train_config;
  TrainLog log;
  EvalResult heldout;
  double final_smoothed_ctc = 0;
  std::size_t parameters = 0;
  std::size_t router_parameters = 0;
  std::optional<Model<float>> model;
};

struct ExperimentReport {
  std::vector<VariantReport> variants;
  std::size_t smoothing_window = 50;

  /// Summary juxtaposing the variants: losses, WER, parameter counts, and
  /// final dispatch fractions for MoE variants.
  std::string to_json() const;
};

struct ExperimentHooks {
  /// Called after each optimizer step.
  std::function<void(const VariantReport&, const TrainRecord&)> on_step;
  /// Checkpoint cadence; 0 disables.
  std::size_t checkpoint_every = 0;
  std::function<void(const VariantReport&, const Model<float>&, std::size_t)> on_checkpoint;
};

/// Trains every (model, train) pair on the same batch stream and seed
/// discipline, then decodes the held-out split.
ExperimentReport run_experiment(std::span<const std::pair<ModelConfig, TrainConfig>> runs,
                                const ExperimentData& data, const ExperimentHooks& hooks = {});

}  // namespace omni

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace omni {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* field) {
    if (!(v > 0)) throw ConfigError(field, std::string(field) + " must be positive");
  };
  positive(peak_lr, "peak_lr");
  positive(static_cast<double>(cosine_steps), "cosine_steps");
  positive(clip_norm, "clip_norm");
  positive(adam_eps, "adam_eps");
  positive(static_cast<double>(max_steps), "max_steps");
  positive(static_cast<double>(batch_max_frames), "batch_max_frames");
  if (!(step_decay_factor > 0 && step_decay_factor <= 1))
    throw ConfigError("step_decay_factor", "step_decay_factor must be in (0, 1]");
  if (aux_weight < 0) throw ConfigError("aux_weight", "aux_weight must be >= 0");
  if (weight_decay < 0) throw ConfigError("weight_decay", "weight_decay must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam_beta1", "adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam_beta2", "adam_beta2 must be in [0, 1)");
  if (!(augment.time_ratio >= 0 && augment.time_ratio <= 1))
    throw ConfigError("time_ratio", "time_ratio must be in [0, 1]");
}

double lr_at(std::size_t step, const TrainConfig& c) {
  const double peak = c.peak_lr;
  if (step < c.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  const double floor = peak * c.step_decay_factor;
  const std::size_t since = step - c.warmup_steps;
  if (since <= c.cosine_steps) {
    const double progress = static_cast<double>(since) / static_cast<double>(c.cosine_steps);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  const std::size_t intervals = (since - c.cosine_steps) / c.cosine_steps;
  return floor * std::pow(c.step_decay_factor, static_cast<double>(intervals));
}

MaskReport apply_masking(std::span<float> features, std::size_t frames, std::size_t feat_dim,
                         const AugmentConfig& config, Rng& rng) {
  if (features.size() != frames * feat_dim) {
    throw DimensionError("apply_masking: feature buffer does not match frames x feat_dim");
  }
  MaskReport report;
  std::vector<std::uint8_t> hit(features.size(), 0);
  const std::size_t max_f = std::min(config.freq_width, feat_dim);
  for (std::size_t m = 0; m < config.freq_masks; ++m) {
    const std::size_t w = std::uniform_int_distribution<std::size_t>(0, max_f)(rng);
    const std::size_t s = std::uniform_int_distribution<std::size_t>(0, feat_dim - w)(rng);
    report.freq.push_back({s, w});
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t k = s; k < s + w; ++k) hit[t * feat_dim + k] = 1;
  }
  const auto ratio_cap =
      static_cast<std::size_t>(std::floor(config.time_ratio * static_cast<double>(frames)));
  const std::size_t max_t = std::min({config.time_width, ratio_cap, frames});
  for (std::size_t m = 0; m < config.time_masks; ++m) {
    const std::size_t w = std::uniform_int_distribution<std::size_t>(0, max_t)(rng);
    const std::size_t s = std::uniform_int_distribution<std::size_t>(0, frames - w)(rng);
    report.time.push_back({s, w});
    for (std::size_t t = s; t < s + w; ++t)
      for (std::size_t k = 0; k < feat_dim; ++k) hit[t * feat_dim + k] = 1;
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (hit[i]) {
      features[i] = 0.0f;
      ++report.masked_cells;
    }
  }
  return report;
}

template <typename T>
double global_grad_norm(std::span<const NamedParameter<T>> params) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(std::span<const NamedParameter<T>> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Tensor<T> t = p.tensor;
      if (!t.has_grad()) continue;
      for (auto& g : t.grad_mut()) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParameter<T>> params, double beta1, double beta2, double eps,
                double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor<T> p = params_[k].tensor;
    auto data = p.data();
    auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      if (lr == 0.0) continue;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      const double w = static_cast<double>(data[i]);
      data[i] = static_cast<T>(w - lr * (update + weight_decay_ * w));
    }
  }
}

void TrainLog::append(TrainRecord r) { records_.push_back(std::move(r)); }

void TrainLog::write_csv(std::ostream& os) const {
  os << "step,lr,ctc_loss,load_balance_loss,total_loss,grad_norm";
  if (!records_.empty()) {
    const auto& usage = records_.front().usage;
    for (std::size_t l = 0; l < usage.size(); ++l)
      for (std::size_t j = 0; j < usage[l].size(); ++j) os << ",f_l" << l << "_e" << j;
  }
  os << '\n';
  os << std::setprecision(17);
  for (const auto& r : records_) {
    os << r.step << ',' << r.lr << ',' << r.ctc_loss << ',' << r.load_balance_loss << ','
       << r.total_loss << ',' << r.grad_norm;
    for (const auto& layer : r.usage)
      for (double f : layer) os << ',' << f;
    os << '\n';
  }
}

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("train log: cannot write " + path);
  write_csv(os);
}

std::vector<double> TrainLog::smoothed_ctc(std::size_t window) const {
  std::vector<double> out;
  out.reserve(records_.size());
  double acc = 0;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    acc += records_[i].ctc_loss;
    if (i >= window) acc -= records_[i - window].ctc_loss;
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

double TrainLog::final_smoothed_ctc(std::size_t window) const {
  if (records_.empty()) return 0.0;
  return smoothed_ctc(window).back();
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, TrainConfig config)
    : model_(model),
      config_(std::move(config)),
      params_(model.parameters()),
      optimizer_(params_, config_.adam_beta1, config_.adam_beta2, config_.adam_eps,
                 config_.weight_decay) {
  config_.validate();
}

template <typename T>
TrainRecord Trainer<T>::step(const Batch& batch, std::size_t step_index) {
  Batch input = batch;
  if (config_.augment_enabled) {
    Rng rng = make_stream(config_.seed, "augment", step_index);
    for (std::size_t b = 0; b < input.size(); ++b)
      apply_masking(input.utterance_mut(b), input.lengths[b], input.feat_dim, config_.augment, rng);
  }

  TrainRecord rec;
  rec.step = step_index;
  rec.lr = lr_at(step_index, config_);

  model_.zero_grad();
  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    std::optional<Tensor<T>> total;
    try {
      ForwardResult<T> fwd = model_.forward(input);
      Tensor<T> lp = log_softmax(fwd.logits);
      Tensor<T> ctc = ctc_loss_batch(lp, std::span<const Segment>(fwd.segments),
                                     std::span<const TokenSeq>(input.targets));
      total = ctc;
      rec.ctc_loss = static_cast<double>(ctc.item());
      if (!fwd.dispatches.empty()) {
        Tensor<T> lb = load_balance_loss(std::span<const DispatchResult<T>>(fwd.dispatches),
                                         model_.config().experts);
        rec.load_balance_loss = static_cast<double>(lb.item());
        total = add(ctc, scale(lb, static_cast<T>(config_.aux_weight)));
        for (const auto& d : fwd.dispatches) rec.usage.push_back(expert_fractions(d));
      }
    } catch (const NumericError& e) {
      throw DivergenceError(rec, std::string("forward: ") + e.what());
    }
    rec.total_loss = static_cast<double>(total->item());
    if (!std::isfinite(rec.ctc_loss)) throw DivergenceError(rec, "ctc_loss");
    if (!std::isfinite(rec.load_balance_loss)) throw DivergenceError(rec, "load_balance_loss");
    tape.backward(*total);
  }
  rec.grad_norm = clip_grad_norm(std::span<const NamedParameter<T>>(params_), config_.clip_norm);
  if (!std::isfinite(rec.grad_norm)) throw DivergenceError(rec, "gradient");
  optimizer_.step(rec.lr);
  return rec;
}

template <typename T>
EvalResult evaluate(const Model<T>& model, const Corpus& corpus, const Tokenizer& tokenizer,
                    std::size_t batch_max_frames, const ForwardOptions& options) {
  EvalResult result;
  if (corpus.empty()) return result;
  NoGradScope<T> no_grad;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t stack = model.config().frame_stack;
  for (const auto& idx : pack_batches(corpus, order, batch_max_frames)) {
    Batch batch = make_batch(corpus, idx, tokenizer, stack);
    ForwardResult<T> fwd = model.forward(batch, options);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Utterance& u = corpus[idx[b]];
      UtteranceResult r;
      r.id = u.id;
      r.reference = u.transcript;
      const TokenSeq hyp = greedy_decode(fwd.logits, fwd.segments[b]);
      r.hypothesis = tokenizer.decode(hyp);
      const auto ref_words = normalize_words(r.reference);
      const auto hyp_words = normalize_words(r.hypothesis);
      r.errors = edit_distance(ref_words, hyp_words);
      r.words = ref_words.size();
      result.tally.errors += r.errors;
      result.tally.words += r.words;
      result.utterances.push_back(std::move(r));
    }
  }
  return result;
}

std::string ExperimentReport::to_json() const {
  nlohmann::ordered_json j;
  j["smoothing_window"] = smoothing_window;
  auto& arr = j["variants"] = nlohmann::ordered_json::array();
  for (const auto& v : variants) {
    nlohmann::ordered_json e;
    e["variant"] = to_string(v.model_config.variant);
    e["layers"] = v.model_config.layers;
    e["embed_dim"] = v.model_config.embed_dim;
    e["ffn_dim"] = v.model_config.ffn_dim;
    e["experts"] = v.model_config.experts;
    e["seed"] = v.train_config.seed;
    e["steps"] = v.log.records().size();
    e["parameters"] = v.parameters;
    e["router_parameters"] = v.router_parameters;
    if (!v.log.empty()) {
      const auto& last = v.log.records().back();
      e["final_ctc_loss"] = last.ctc_loss;
      e["final_smoothed_ctc_loss"] = v.final_smoothed_ctc;
      e["final_load_balance_loss"] = last.load_balance_loss;
      if (!last.usage.empty()) e["final_expert_usage"] = last.usage;
    }
    e["heldout_wer"] = v.heldout.wer();
    e["heldout_word_errors"] = v.heldout.tally.errors;
    e["heldout_words"] = v.heldout.tally.words;
    arr.push_back(std::move(e));
  }
  return j.dump(2);
}

ExperimentReport run_experiment(std::span<const std::pair<ModelConfig, TrainConfig>> runs,
                                const ExperimentData& data, const ExperimentHooks& hooks) {
  if (runs.empty()) throw ContractError("run_experiment: no runs");
  if (data.train.empty()) throw ContractError("run_experiment: empty training corpus");
  for (const auto& [mc, tc] : runs) {
    TrainConfig a = tc, b = runs.front().second;
    a.aux_weight = b.aux_weight;  // irrelevant for dense, the only variant-forced field
    if (!(a == b)) throw ContractError("run_experiment: training configs differ between variants");
    mc.validate();
    tc.validate();
  }

  ExperimentReport report;
  for (const auto& [mc, tc] : runs) {
    VariantReport vr;
    vr.model_config = mc;
    vr.train_config = tc;
    Model<float> model = Model<float>::build(mc, tc.seed);
    vr.parameters = model.parameter_count();
    vr.router_parameters = mc.is_moe() ? router_param_count(mc) : 0;
    Trainer<float> trainer(model, tc);

    std::size_t step = 1;
    for (std::size_t epoch = 0; step <= tc.max_steps; ++epoch) {
      std::vector<std::size_t> order(data.train.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng = make_stream(tc.seed, "batches", epoch);
      std::shuffle(order.begin(), order.end(), rng);
      for (const auto& idx : pack_batches(data.train, order, tc.batch_max_frames)) {
        if (step > tc.max_steps) break;
        Batch batch = make_batch(data.train, idx, data.tokenizer, mc.frame_stack);
        TrainRecord rec = trainer.step(batch, step);
        vr.log.append(rec);
        if (hooks.on_step) hooks.on_step(vr, rec);
        if (hooks.checkpoint_every && hooks.on_checkpoint && step % hooks.checkpoint_every == 0)
          hooks.on_checkpoint(vr, model, step);
        ++step;
      }
    }
    vr.final_smoothed_ctc = vr.log.final_smoothed_ctc(report.smoothing_window);
    vr.heldout = evaluate(model, data.heldout, data.tokenizer, tc.batch_max_frames);
    vr.model = std::move(model);
    report.variants.push_back(std::move(vr));
  }
  return report;
}

#define OMNI_INSTANTIATE_TRAINING(T)                                                         \
  template double global_grad_norm(std::span<const NamedParameter<T>>);                      \
  template double clip_grad_norm(std::span<const NamedParameter<T>>, double);                \
  template class AdamW<T>;                                                                   \
  template class Trainer<T>;                                                                 \
  template EvalResult evaluate(const Model<T>&, const Corpus&, const Tokenizer&, std::size_t, \
                               const ForwardOptions&);

OMNI_INSTANTIATE_TRAINING(float)
OMNI_INSTANTIATE_TRAINING(double)

}  // namespace omni

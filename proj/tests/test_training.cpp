// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "omni/training.hpp"
#include "support.hpp"

using namespace omni;
using omni::testing::tiny_batch;
using omni::testing::tiny_config;

namespace {

std::vector<std::vector<double>> snapshot(const Model<double>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

ExperimentData tiny_data(std::size_t count = 24) {
  const Corpus c = generate(omni::testing::tiny_spec(11), count);
  auto [train, held] = split_corpus(c, 0.25);
  return {train, held, Tokenizer::for_alphabet_size(5)};
}

TrainConfig quick_config(std::size_t steps) {
  TrainConfig t;
  t.max_steps = steps;
  t.warmup_steps = 5;
  t.cosine_steps = 50;
  t.batch_max_frames = 60;
  t.augment.freq_width = 3;
  t.augment.time_width = 2;
  return t;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.peak_lr = 1e-3;
  c.warmup_steps = 100;
  c.cosine_steps = 400;
  c.step_decay_factor = 0.5;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(100, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(300, c) == doctest::Approx((1e-3 + 5e-4) / 2).epsilon(1e-12));
  CHECK(lr_at(500, c) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(899, c) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(900, c) == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(lr_at(1300, c) == doctest::Approx(1.25e-4).epsilon(1e-12));

  // Continuity at the warmup/cosine junction.
  CHECK(std::abs(lr_at(99, c) - lr_at(100, c)) < 1e-5 + 1e-12);
  CHECK(std::abs(lr_at(101, c) - lr_at(100, c)) < 1e-6);

  TrainConfig paper;
  paper.peak_lr = 0.001;
  paper.warmup_steps = 64000;
  paper.cosine_steps = 60000;
  CHECK(lr_at(32000, paper) == doctest::Approx(0.0005).epsilon(1e-12));

  // Non-increasing after warmup.
  for (std::size_t s = 100; s < 2000; ++s) CHECK(lr_at(s + 1, c) <= lr_at(s, c) + 1e-18);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.step_decay_factor = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.step_decay_factor = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.clip_norm = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.peak_lr = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("masking") {
  std::vector<float> x(20 * 6);
  std::iota(x.begin(), x.end(), 1.0f);
  const auto original = x;

  AugmentConfig none{2, 0, 3, 0, 0.1};
  Rng rng(1);
  auto r = apply_masking(x, 20, 6, none, rng);
  CHECK(x == original);
  CHECK(r.masked_cells == 0);

  // A span may cover the whole time axis.
  AugmentConfig whole{0, 0, 1, 20, 1.0};
  bool covered = false;
  for (std::uint64_t s = 0; s < 400 && !covered; ++s) {
    x = original;
    Rng g(s);
    auto rep = apply_masking(x, 20, 6, whole, g);
    CHECK(rep.time.front().width <= 20);
    if (rep.time.front().width == 20) {
      covered = std::all_of(x.begin(), x.end(), [](float v) { return v == 0.0f; });
    }
  }
  CHECK(covered);

  // Counting oracle: replay the draws and mark cells in a set.
  AugmentConfig cfg{3, 4, 4, 5, 0.2};
  for (std::uint64_t s = 0; s < 50; ++s) {
    const std::size_t frames = 7 + s % 30, dim = 6;
    std::vector<float> f(frames * dim, 1.0f);
    Rng a = make_stream(s, "augment", 0), b = a;
    auto rep = apply_masking(f, frames, dim, cfg, a);

    std::set<std::pair<std::size_t, std::size_t>> cells;
    const std::size_t fw = std::min<std::size_t>(cfg.freq_width, dim);
    for (std::size_t m = 0; m < cfg.freq_masks; ++m) {
      const auto w = std::uniform_int_distribution<std::size_t>(0, fw)(b);
      const auto st = std::uniform_int_distribution<std::size_t>(0, dim - w)(b);
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t k = st; k < st + w; ++k) cells.insert({t, k});
    }
    const auto tw = std::min<std::size_t>(
        cfg.time_width, static_cast<std::size_t>(cfg.time_ratio * static_cast<double>(frames)));
    for (std::size_t m = 0; m < cfg.time_masks; ++m) {
      const auto w = std::uniform_int_distribution<std::size_t>(0, tw)(b);
      const auto st = std::uniform_int_distribution<std::size_t>(0, frames - w)(b);
      for (std::size_t t = st; t < st + w; ++t)
        for (std::size_t k = 0; k < dim; ++k) cells.insert({t, k});
    }
    CHECK(rep.masked_cells == cells.size());
    CHECK(static_cast<std::size_t>(std::count(f.begin(), f.end(), 0.0f)) == cells.size());
  }
  std::vector<float> wrong(5);
  CHECK_THROWS_AS(apply_masking(wrong, 2, 3, cfg, rng), DimensionError);
}

TEST_CASE("gradient clipping") {
  auto a = Tensor<double>::zeros({2}).set_requires_grad();
  auto b = Tensor<double>::zeros({1}).set_requires_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    // grad(a) = (0.3, 0), grad(b) = (0.4): global norm 0.5.
    auto w = Tensor<double>::from({2}, {0.3, 0.0});
    tape.backward(add(sum(mul(a, w)), sum(scale(b, 0.4))));
  }
  std::vector<NamedParameter<double>> ps{{"a", a}, {"b", b}};
  const double before = clip_grad_norm(std::span<const NamedParameter<double>>(ps), 0.1);
  CHECK(before == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(global_grad_norm(std::span<const NamedParameter<double>>(ps)) - 0.1) < 1e-6);
  CHECK(a.grad()[0] == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(b.grad()[0] == doctest::Approx(0.08).epsilon(1e-12));

  // Below the threshold nothing changes.
  CHECK(clip_grad_norm(std::span<const NamedParameter<double>>(ps), 1.0) == doctest::Approx(0.1));
  CHECK(a.grad()[0] == doctest::Approx(0.06).epsilon(1e-12));
}

TEST_CASE("AdamW decay is decoupled") {
  auto w = Tensor<double>::from({3}, {1.0, -2.0, 0.5});
  AdamW<double> opt({{"w", w}}, 0.9, 0.98, 1e-9, 0.01);
  opt.step(0.1);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0).epsilon(1e-15));
  CHECK(w.data()[1] == doctest::Approx(-2.0 - 0.1 * 0.01 * -2.0).epsilon(1e-15));
  const double before = w.data()[2];
  opt.step(0.1);
  CHECK(w.data()[2] == doctest::Approx(before * (1 - 0.001)).epsilon(1e-15));
}

TEST_CASE("zero learning rate leaves parameters bit-exact") {
  auto model = Model<double>::build(tiny_config(Variant::Switch), 4);
  const auto before = snapshot(model);
  TrainConfig c;
  c.warmup_steps = 10;
  Trainer<double> trainer(model, c);
  const auto rec = trainer.step(tiny_batch(), 0);
  CHECK(rec.lr == 0.0);
  CHECK(rec.grad_norm > 0);
  CHECK(snapshot(model) == before);
}

TEST_CASE("train step composes the loss") {
  auto model = Model<double>::build(tiny_config(Variant::Omni), 4);
  TrainConfig c;
  c.aux_weight = 10;
  Trainer<double> trainer(model, c);
  const auto rec = trainer.step(tiny_batch(), 3);
  CHECK(rec.total_loss == doctest::Approx(rec.ctc_loss + 10 * rec.load_balance_loss).epsilon(1e-12));
  REQUIRE(rec.usage.size() == 2);
  for (const auto& layer : rec.usage) {
    CHECK(layer.size() == 2);
    CHECK(std::abs(layer[0] + layer[1] - 1.0) < 1e-12);
  }

  auto dense = Model<double>::build(tiny_config(Variant::Dense), 4);
  Trainer<double> dt(dense, c);
  const auto drec = dt.step(tiny_batch(), 3);
  CHECK(drec.load_balance_loss == 0.0);
  CHECK(drec.usage.empty());
  CHECK(drec.total_loss == drec.ctc_loss);
}

TEST_CASE("fixed seed gives an identical 50-step log") {
  auto run = [] {
    auto model = Model<float>::build(tiny_config(Variant::Switch), 9);
    TrainConfig c = quick_config(50);
    Trainer<float> trainer(model, c);
    const Corpus corpus = generate(omni::testing::tiny_spec(5), 12);
    const Tokenizer tok = Tokenizer::for_alphabet_size(5);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    const auto batches = pack_batches(corpus, order, c.batch_max_frames);
    TrainLog log;
    for (std::size_t s = 0; s < 50; ++s) {
      log.append(trainer.step(make_batch(corpus, batches[s % batches.size()], tok, 2), s));
    }
    std::ostringstream os;
    log.write_csv(os);
    return os.str();
  };
  const std::string a = run();
  CHECK(a == run());
  CHECK(a.substr(0, a.find('\n')) ==
        "step,lr,ctc_loss,load_balance_loss,total_loss,grad_norm,f_l0_e0,f_l0_e1,f_l1_e0,f_l1_e1");
  CHECK(std::count(a.begin(), a.end(), '\n') == 51);
}

TEST_CASE("divergence is reported with the step and term") {
  auto model = Model<double>::build(tiny_config(Variant::Dense), 4);
  model.parameters().front().tensor.data()[0] = std::numeric_limits<double>::infinity();
  Trainer<double> trainer(model, TrainConfig{});
  try {
    trainer.step(tiny_batch(), 17);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.record().step == 17);
    CHECK(!e.term().empty());
  }
}

TEST_CASE("smoothed log") {
  TrainLog log;
  for (std::size_t s = 0; s < 5; ++s) log.append(TrainRecord{s, 0, static_cast<double>(s), 0, 0, 0, {}});
  const auto sm = log.smoothed_ctc(2);
  CHECK(sm == std::vector<double>{0, 0.5, 1.5, 2.5, 3.5});
  CHECK(log.final_smoothed_ctc(10) == 2.0);
}

TEST_CASE("experiment report structure") {
  const ExperimentData data = tiny_data();
  TrainConfig t = quick_config(6);
  std::vector<std::pair<ModelConfig, TrainConfig>> one{{tiny_config(Variant::Dense), t}};
  const auto single = run_experiment(one, data);
  REQUIRE(single.variants.size() == 1);
  CHECK(single.variants[0].log.records().size() == 6);
  CHECK(single.variants[0].heldout.utterances.size() == data.heldout.size());

  std::vector<std::pair<ModelConfig, TrainConfig>> two{{tiny_config(Variant::Dense), t},
                                                       {tiny_config(Variant::Switch), t}};
  const auto report = run_experiment(two, data);
  std::ostringstream dense_csv, switch_csv;
  report.variants[0].log.write_csv(dense_csv);
  report.variants[1].log.write_csv(switch_csv);
  CHECK(dense_csv.str().find("f_l0_e0") == std::string::npos);
  CHECK(switch_csv.str().find("f_l1_e1") != std::string::npos);
  // Same seed discipline: the dense run is reproduced inside the pair.
  std::ostringstream again;
  single.variants[0].log.write_csv(again);
  CHECK(again.str() == dense_csv.str());
  CHECK(report.to_json().find("\"switch\"") != std::string::npos);
}

TEST_CASE("load-balance pressure keeps experts in use") {
  const ExperimentData data = tiny_data(60);
  TrainConfig t = quick_config(150);
  t.peak_lr = 3e-3;
  t.aux_weight = 10;
  std::vector<std::pair<ModelConfig, TrainConfig>> runs{{tiny_config(Variant::Switch), t}};
  const auto report = run_experiment(runs, data);
  const auto& last = report.variants[0].log.records().back();
  for (const auto& layer : last.usage) CHECK(*std::max_element(layer.begin(), layer.end()) < 0.9);
}

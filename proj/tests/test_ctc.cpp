// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "omni/ctc.hpp"
#include "omni/error.hpp"
#include "support.hpp"

using namespace omni;
using omni::testing::TensorD;

namespace {

TensorD to_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return TensorD::from({rows.size(), rows[0].size()}, flat);
}

std::vector<std::string> words(const std::string& s) { return normalize_words(s); }

}  // namespace

TEST_CASE("hand examples") {
  const double h = std::log(0.5);
  const std::vector<int> a{1};
  CHECK(ctc_loss(to_tensor({{h, h}}), std::span<const int>(a)).item() == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
  CHECK(ctc_loss(to_tensor({{h, h}, {h, h}}), std::span<const int>(a)).item() ==
        doctest::Approx(0.28768207245178).epsilon(1e-12));
  CHECK(ctc_min_frames(std::vector<int>{1, 1, 2}) == 4);
  const std::vector<int> rep{1, 1};
  CHECK_THROWS_AS(ctc_loss(to_tensor({{h, h}, {h, h}}), std::span<const int>(rep)), InfeasibleTargetError);
}

TEST_CASE("dynamic program equals enumeration") {
  std::mt19937_64 rng(2024);
  for (int inst = 0; inst < 60; ++inst) {
    const std::size_t t = 1 + rng() % 6, v = 2 + rng() % 3;
    const auto lp = omni::testing::random_log_probs(t, v, rng);
    std::vector<int> target;
    const std::size_t u = rng() % (t + 1);
    for (std::size_t i = 0; i < u; ++i) target.push_back(1 + static_cast<int>(rng() % (v - 1)));
    if (ctc_min_frames(target) > t) {
      CHECK_THROWS_AS(ctc_loss(to_tensor(lp), std::span<const int>(target)), InfeasibleTargetError);
      continue;
    }
    const double dp = ctc_loss(to_tensor(lp), std::span<const int>(target)).item();
    CHECK(std::abs(dp - omni::testing::ctc_brute_force(lp, target)) < 1e-10);
  }
}

TEST_CASE("probability conservation") {
  std::mt19937_64 rng(5);
  const std::size_t t = 4, v = 3;
  const auto lp = omni::testing::random_log_probs(t, v, rng);
  // Every alignment collapses to exactly one target of length <= t.
  double mass = 0;
  std::vector<std::vector<int>> targets{{}};
  for (std::size_t len = 1; len <= t; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& p : targets)
      if (p.size() == len - 1)
        for (int c = 1; c < static_cast<int>(v); ++c) {
          auto q = p;
          q.push_back(c);
          next.push_back(q);
        }
    targets.insert(targets.end(), next.begin(), next.end());
  }
  for (const auto& target : targets) {
    if (ctc_min_frames(target) > t) continue;
    mass += std::exp(-ctc_loss(to_tensor(lp), std::span<const int>(target)).item());
  }
  CHECK(std::abs(mass - 1.0) < 1e-12);
}

TEST_CASE("gradient matches finite differences") {
  std::mt19937_64 rng(77);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t t = 3 + rng() % 4, v = 3 + rng() % 2;
    std::vector<int> target{1 + static_cast<int>(rng() % (v - 1)), 1 + static_cast<int>(rng() % (v - 1))};
    if (ctc_min_frames(target) > t) continue;
    const auto r = omni::testing::gradcheck(
        [&](const std::vector<TensorD>& in) { return ctc_loss(in[0], std::span<const int>(target)); },
        {to_tensor(omni::testing::random_log_probs(t, v, rng))});
    CHECK(r.rel_error < 1e-6);
  }
}

TEST_CASE("batch loss is the mean over utterances") {
  std::mt19937_64 rng(3);
  auto lp = to_tensor(omni::testing::random_log_probs(7, 3, rng));
  std::vector<Segment> segs{{0, 4}, {4, 3}};
  std::vector<TokenSeq> targets{{1, 2}, {2}};
  const double a = ctc_loss(lp, segs[0], std::span<const int>(targets[0])).item();
  const double b = ctc_loss(lp, segs[1], std::span<const int>(targets[1])).item();
  CHECK(ctc_loss_batch(lp, std::span<const Segment>(segs), std::span<const TokenSeq>(targets)).item() ==
        doctest::Approx((a + b) / 2).epsilon(1e-14));
}

TEST_CASE("greedy decoding") {
  CHECK(greedy_decode(std::vector<int>{1, 1, 0, 2}) == TokenSeq{1, 2});
  CHECK(greedy_decode(std::vector<int>{0, 0, 0}).empty());
  CHECK(greedy_decode(std::vector<int>{1, 0, 1}) == TokenSeq{1, 1});

  std::mt19937_64 rng(8);
  auto scores = omni::testing::random_tensor({9, 4}, rng, -3, 3);
  auto transformed = exp(scale(scores, 2.0));
  CHECK(greedy_decode(scores) == greedy_decode(transformed));
  CHECK(frame_argmax(scores, Segment{2, 3}).size() == 3);
}

TEST_CASE("word error rate") {
  CHECK(wer(words("a b c"), words("a b c")) == 0.0);
  CHECK(wer(words("a b c"), words("a x c")) == doctest::Approx(1.0 / 3));
  CHECK(wer(words("a b"), words("")) == 1.0);
  CHECK(wer(words("A  b"), words("a B")) == 0.0);
  CHECK_THROWS_AS(wer(words(""), words("a")), ContractError);
  auto x = words("the cat sat on it"), y = words("a cat sat it down");
  CHECK(edit_distance(x, y) == edit_distance(y, x));
  CHECK(edit_distance(x, y) == 3);
}

// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "omni/error.hpp"
#include "omni/ops.hpp"
#include "support.hpp"

using namespace omni;
using omni::testing::gradcheck;
using omni::testing::random_tensor;
using omni::testing::TensorD;

namespace {

constexpr double kPrimitiveTol = 1e-5;

std::vector<double> values(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("matmul values and shape errors") {
  auto id = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto b = TensorD::from({2, 2}, {3, 4, 5, 6});
  CHECK(values(matmul(id, b)) == std::vector<double>{3, 4, 5, 6});
  auto r = matmul(TensorD::from({1, 2}, {1, 2}), TensorD::from({2, 1}, {3, 4}));
  CHECK(r.item() == 11);
  try {
    matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax values and stability") {
  auto s = softmax(TensorD::from({1, 3}, {1, 2, 3}));
  CHECK(s.at(0, 0) == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s.at(0, 1) == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s.at(0, 2) == doctest::Approx(0.66524).epsilon(1e-4));
  auto half = softmax(TensorD::from({1, 2}, {0, 0}));
  CHECK(half.at(0, 0) == 0.5);
  auto big = softmax(Tensor<float>::from({1, 2}, {1000.f, 0.f}));
  CHECK(big.at(0, 0) == 1.0f);
  CHECK(std::isfinite(big.at(0, 1)));
  CHECK_THROWS_AS(softmax(TensorD::from({1, 2}, {std::nan(""), 0})), NumericError);

  std::mt19937_64 rng(3);
  auto x = random_tensor({5, 7}, rng, -20, 20);
  auto p = softmax(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      CHECK(p.at(i, j) > 0);
      CHECK(p.at(i, j) < 1);
      total += p.at(i, j);
    }
    CHECK(std::abs(total - 1) < 1e-6);
  }
}

TEST_CASE("layer_norm examples") {
  auto gain = TensorD::full({2}, 1), bias = TensorD::zeros({2});
  auto constant = layer_norm(TensorD::from({1, 2}, {4, 4}), gain, bias);
  CHECK(values(constant) == std::vector<double>{0, 0});
  auto two = layer_norm(TensorD::from({1, 2}, {1, 3}), gain, bias, 1e-12);
  CHECK(two.at(0, 0) == doctest::Approx(-1).epsilon(1e-9));
  CHECK(two.at(0, 1) == doctest::Approx(1).epsilon(1e-9));
}

TEST_CASE("gather and scatter are adjoint") {
  auto x = TensorD::from({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::size_t> idx{0, 0};
  auto back = scatter_add_rows(gather_rows(x, std::span<const std::size_t>(idx)),
                               std::span<const std::size_t>(idx), 3);
  CHECK(values(back) == std::vector<double>{2, 4, 0, 0, 0, 0});

  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> d(-5, 5);
  auto xi = TensorD::zeros({4, 3});
  auto g = TensorD::zeros({6, 3});
  for (auto& v : xi.data()) v = d(rng);
  for (auto& v : g.data()) v = d(rng);
  std::vector<std::size_t> rows{3, 1, 1, 0, 2, 3};
  auto sc = scatter_add_rows(g, std::span<const std::size_t>(rows), 4);
  auto ga = gather_rows(xi, std::span<const std::size_t>(rows));
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < sc.numel(); ++i) lhs += sc.data()[i] * xi.data()[i];
  for (std::size_t i = 0; i < ga.numel(); ++i) rhs += g.data()[i] * ga.data()[i];
  CHECK(lhs == rhs);

  std::vector<std::size_t> bad{4};
  CHECK_THROWS_AS(gather_rows(xi, std::span<const std::size_t>(bad)), IndexError);
}

TEST_CASE("gelu at zero and shape rules") {
  CHECK(gelu(TensorD::from({1}, {0})).item() == 0);
  CHECK_THROWS_AS(add(TensorD::zeros({2, 2}), TensorD::zeros({2, 3})), DimensionError);
  CHECK_THROWS_AS(reshape(TensorD::zeros({2, 3}), {4}), DimensionError);
  CHECK_THROWS_AS(TensorD::zeros({0, 3}), DimensionError);
}

TEST_CASE("backward semantics") {
  auto w = TensorD::from({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(w));
  }
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == std::vector<double>(6, 1.0));

  // Without reset, a second backward accumulates.
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(w));
  }
  CHECK(w.grad()[0] == 2.0);

  // loss = sum(W x) with W [2x3], x [3x1]: every row of grad(W) equals x^T.
  w.zero_grad();
  auto x = TensorD::from({3, 1}, {0.5, -1, 2});
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(matmul(w, x)));
  }
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) ==
        std::vector<double>{0.5, -1, 2, 0.5, -1, 2});

  Tape<double> tape;
  TapeScope<double> scope(tape);
  CHECK_THROWS_AS(tape.backward(mul(w, w)), ContractError);
}

TEST_CASE("no-grad scope records nothing") {
  auto w = TensorD::full({2, 2}, 1).set_requires_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> ng;
    (void)matmul(w, w);
  }
  CHECK(tape.size() == 0);
  (void)matmul(w, w);
  CHECK(tape.size() == 1);
}

TEST_CASE("finite-difference checks for every primitive") {
  std::mt19937_64 rng(42);
  auto check = [](const char* name, const omni::testing::Fn& f, std::vector<TensorD> in) {
    const auto r = gradcheck(f, std::move(in));
    INFO(name << " rel error " << r.rel_error);
    CHECK(r.rel_error < kPrimitiveTol);
  };
  std::vector<std::size_t> idx{2, 0, 2, 1};
  std::vector<std::uint8_t> mask{1, 0, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1};
  std::vector<Segment> segs{{0, 3}, {3, 2}};
  std::vector<std::uint8_t> valid{1, 1, 0, 1, 1};

  check("matmul", [](auto& v) { return matmul(v[0], v[1]); },
        {random_tensor({4, 3}, rng), random_tensor({3, 2}, rng)});
  check("transpose", [](auto& v) { return transpose(v[0]); }, {random_tensor({3, 4}, rng)});
  check("add", [](auto& v) { return add(v[0], v[1]); }, {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)});
  check("sub", [](auto& v) { return sub(v[0], v[1]); }, {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)});
  check("mul", [](auto& v) { return mul(v[0], v[1]); }, {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)});
  check("scale", [](auto& v) { return scale(v[0], 2.5); }, {random_tensor({3, 2}, rng)});
  check("add_bias", [](auto& v) { return add_bias(v[0], v[1]); }, {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  check("row_scale", [](auto& v) { return row_scale(v[0], v[1]); }, {random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  check("gelu", [](auto& v) { return gelu(v[0]); }, {random_tensor({3, 4}, rng, -3, 3)});
  check("exp", [](auto& v) { return exp(v[0]); }, {random_tensor({3, 4}, rng)});
  check("log", [](auto& v) { return log(v[0]); }, {random_tensor({3, 4}, rng, 0.5, 2)});
  check("softmax", [](auto& v) { return softmax(v[0]); }, {random_tensor({3, 5}, rng, -2, 2)});
  check("log_softmax", [](auto& v) { return log_softmax(v[0]); }, {random_tensor({3, 5}, rng, -2, 2)});
  check("layer_norm", [](auto& v) { return layer_norm(v[0], v[1], v[2]); },
        {random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  check("gather_rows", [&](auto& v) { return gather_rows(v[0], std::span<const std::size_t>(idx)); },
        {random_tensor({3, 2}, rng)});
  check("scatter_add_rows",
        [&](auto& v) { return scatter_add_rows(v[0], std::span<const std::size_t>(idx), 3); },
        {random_tensor({4, 2}, rng)});
  check("pick", [&](auto& v) { return pick(v[0], std::span<const std::size_t>(idx)); }, {random_tensor({4, 3}, rng)});
  check("mask_fill", [&](auto& v) { return mask_fill(v[0], std::span<const std::uint8_t>(mask), -1.0); },
        {random_tensor({4, 3}, rng)});
  check("reshape", [](auto& v) { return reshape(v[0], {6, 2}); }, {random_tensor({3, 4}, rng)});
  check("sum", [](auto& v) { return sum(v[0]); }, {random_tensor({3, 4}, rng)});
  check("mean", [](auto& v) { return mean(v[0]); }, {random_tensor({3, 4}, rng)});
  check("multi_head_attention",
        [&](auto& v) {
          return multi_head_attention(v[0], v[1], v[2], 2, std::span<const Segment>(segs),
                                      std::span<const std::uint8_t>(valid));
        },
        {random_tensor({5, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)});
}

TEST_CASE("determinism of forward and backward") {
  auto run = [] {
    std::mt19937_64 rng(5);
    auto a = random_tensor({4, 4}, rng).set_requires_grad();
    auto b = random_tensor({4, 4}, rng);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = sum(softmax(gelu(matmul(a, b))));
    tape.backward(y);
    std::vector<double> out{y.item()};
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    return out;
  };
  CHECK(run() == run());
}

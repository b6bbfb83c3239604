#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

#include "mcaforge/rng.hpp"
#include "mcaforge/tape.hpp"
#include "mcaforge/tensor.hpp"

using namespace mcaforge;

namespace {

Tensor random_tensor(SplitMix64& rng, std::vector<std::size_t> shape, double lo = -2.0,
                     double hi = 2.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("tape forward agrees bit for bit with the tensor ops") {
  SplitMix64 rng(31);
  const Tensor a = random_tensor(rng, {5, 7});
  const Tensor b = random_tensor(rng, {7, 4});
  const Tensor c = random_tensor(rng, {5, 7});
  const Tensor gain = random_tensor(rng, {7});
  const Tensor bias = random_tensor(rng, {7});

  GradTape t;
  const Var va = t.leaf(a), vb = t.leaf(b), vc = t.leaf(c);
  const Var vg = t.leaf(gain), vbias = t.leaf(bias);

  CHECK(bit_equal(t.value(t.matmul(va, vb)), matmul(a, b)));
  CHECK(bit_equal(t.value(t.matmul_nt(va, vc)), matmul(a, transpose(c))));
  CHECK(bit_equal(t.value(t.softmax_rows(va)), softmax_rows(a)));
  CHECK(bit_equal(t.value(t.layer_norm(va, vg, vbias)), layer_norm(a, gain, bias)));
  CHECK(bit_equal(t.value(t.add(va, vc)), add(a, c)));
  CHECK(bit_equal(t.value(t.sub(va, vc)), sub(a, c)));
  CHECK(bit_equal(t.value(t.scale(va, -1.75)), scale(a, -1.75)));
  CHECK(bit_equal(t.value(t.concat_rows(va, vc)), concat_rows(a, c)));
  CHECK(bit_equal(t.value(t.slice_rows(va, 1, 4)), slice_rows(a, 1, 4)));
}

TEST_CASE("column concat and slice invert each other") {
  SplitMix64 rng(32);
  const Tensor a = random_tensor(rng, {3, 2});
  const Tensor b = random_tensor(rng, {3, 5});
  GradTape t;
  const Var va = t.leaf(a), vb = t.leaf(b);
  const Var cat = t.concat_cols({va, vb});
  REQUIRE(t.value(cat).cols() == 7);
  CHECK(bit_equal(t.value(t.slice_cols(cat, 0, 2)), a));
  CHECK(bit_equal(t.value(t.slice_cols(cat, 2, 7)), b));
}

TEST_CASE("gradients accumulate additively at fan-out") {
  SplitMix64 rng(33);
  const Tensor x = random_tensor(rng, {2, 3});
  const Tensor c = random_tensor(rng, {2, 3});
  GradTape t;
  const Var vx = t.leaf(x);
  const Var vc = t.constant(c);
  // f = sum((x + x) * c)  =>  df/dx = 2c exactly.
  const Var out = t.sum(t.mul(t.add(vx, vx), vc));
  t.backward(out);
  const std::vector<double>& g = t.grad64(vx);
  for (std::size_t i = 0; i < x.numel(); ++i)
    REQUIRE(g[i] == 2.0 * static_cast<double>(c[i]));
}

TEST_CASE("matmul gradient matches the closed form for a sum loss") {
  SplitMix64 rng(34);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 2});
  GradTape t;
  const Var va = t.leaf(a), vb = t.leaf(b);
  t.backward(t.sum(t.matmul(va, vb)));
  // d/dA[i,p] sum(AB) = sum_j B[p,j]; d/dB[p,j] = sum_i A[i,p].
  const std::vector<double>& ga = t.grad64(va);
  const std::vector<double>& gb = t.grad64(vb);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t p = 0; p < 4; ++p) {
      double ref = 0.0;
      for (std::size_t j = 0; j < 2; ++j) ref += b.at(p, j);
      REQUIRE(ga[i * 4 + p] == Catch::Approx(ref).margin(1e-12));
    }
  }
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t j = 0; j < 2; ++j) {
      double ref = 0.0;
      for (std::size_t i = 0; i < 3; ++i) ref += a.at(i, p);
      REQUIRE(gb[p * 2 + j] == Catch::Approx(ref).margin(1e-12));
    }
  }
}

TEST_CASE("sum of squares passes a tight finite-difference check") {
  SplitMix64 rng(35);
  const Tensor x = random_tensor(rng, {3, 4});
  const double worst = grad_check(
      [](GradTape& t, const std::vector<Var>& in) { return t.sum_squares(in[0]); }, {x});
  CHECK(worst < 1e-6);
}

TEST_CASE("attention-shaped composite passes finite-difference checks") {
  SplitMix64 rng(36);
  const Tensor q = random_tensor(rng, {5, 4});
  const Tensor k = random_tensor(rng, {5, 4});
  const Tensor v = random_tensor(rng, {5, 4});
  const Tensor target = random_tensor(rng, {5, 4});
  const double worst = grad_check(
      [&](GradTape& t, const std::vector<Var>& in) {
        const Var scores = t.scale(t.matmul_nt(in[0], in[1]), 0.5);
        const Var attn = t.softmax_rows(scores);
        const Var out = t.matmul(attn, in[2]);
        return t.mse(out, t.constant(target));
      },
      {q, k, v});
  CHECK(worst < 1e-4);
}

TEST_CASE("layer_norm gradient passes checks and is shift-invariant") {
  SplitMix64 rng(37);
  const Tensor x = random_tensor(rng, {3, 6});
  const Tensor gain = random_tensor(rng, {6}, 0.5, 1.5);
  const Tensor bias = random_tensor(rng, {6});
  const Tensor target = random_tensor(rng, {3, 6});

  const double worst = grad_check(
      [&](GradTape& t, const std::vector<Var>& in) {
        return t.mse(t.layer_norm(in[0], in[1], in[2]), t.constant(target));
      },
      {x, gain, bias});
  CHECK(worst < 1e-4);

  // Per-row standardization kills uniform shifts, so row sums of dL/dx vanish.
  GradTape t;
  const Var vx = t.leaf(x), vg = t.leaf(gain), vb = t.leaf(bias);
  t.backward(t.mse(t.layer_norm(vx, vg, vb), t.constant(target)));
  const std::vector<double>& g = t.grad64(vx);
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 6; ++j) row += g[i * 6 + j];
    REQUIRE(std::abs(row) < 1e-12);
  }
}

TEST_CASE("gelu and remaining ops pass finite-difference checks") {
  SplitMix64 rng(38);
  const Tensor x = random_tensor(rng, {4, 5});
  const Tensor y = random_tensor(rng, {4, 5});
  const Tensor row = random_tensor(rng, {1, 5});

  CHECK(grad_check([](GradTape& t, const std::vector<Var>& in) { return t.sum(t.gelu(in[0])); },
                   {x}) < 1e-4);
  CHECK(grad_check(
            [](GradTape& t, const std::vector<Var>& in) {
              return t.sum_squares(t.add_row(in[0], in[1]));
            },
            {x, row}) < 1e-4);
  CHECK(grad_check(
            [](GradTape& t, const std::vector<Var>& in) {
              return t.sum_squares(t.concat_rows(in[0], in[1]));
            },
            {x, y}) < 1e-6);
  CHECK(grad_check(
            [](GradTape& t, const std::vector<Var>& in) {
              return t.sum_squares(t.concat_cols({in[0], in[1]}));
            },
            {x, y}) < 1e-6);
  CHECK(grad_check([](GradTape& t,
                      const std::vector<Var>& in) { return t.mse(in[0], in[1]); },
                   {x, y}) < 1e-6);
}

TEST_CASE("slices route gradients to the right coordinates") {
  SplitMix64 rng(39);
  const Tensor x = random_tensor(rng, {4, 3});
  GradTape t;
  const Var vx = t.leaf(x);
  t.backward(t.sum_squares(t.slice_rows(vx, 1, 3)));
  const std::vector<double>& g = t.grad64(vx);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double expect = (i >= 1 && i < 3) ? 2.0 * static_cast<double>(x.at(i, j)) : 0.0;
      REQUIRE(g[i * 3 + j] == Catch::Approx(expect).margin(1e-15));
    }
  }

  GradTape t2;
  const Var vx2 = t2.leaf(x);
  t2.backward(t2.sum(t2.slice_cols(vx2, 2, 3)));
  const std::vector<double>& g2 = t2.grad64(vx2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(g2[i * 3 + j] == (j == 2 ? 1.0 : 0.0));
}

TEST_CASE("mse value matches its definition") {
  SplitMix64 rng(40);
  const Tensor a = random_tensor(rng, {3, 3});
  const Tensor b = random_tensor(rng, {3, 3});
  GradTape t;
  const double got = t.scalar(t.mse(t.leaf(a), t.leaf(b)));
  double ref = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    ref += d * d;
  }
  ref /= static_cast<double>(a.numel());
  CHECK(got == Catch::Approx(ref).epsilon(1e-14));
}

TEST_CASE("constant subgraphs contribute no gradient and cost no propagation") {
  SplitMix64 rng(41);
  const Tensor x = random_tensor(rng, {2, 2});
  GradTape t;
  const Var vx = t.leaf(x, true);
  const Var vc = t.constant(x);
  t.backward(t.sum(vc));
  for (double g : t.grad64(vx)) CHECK(g == 0.0);
  CHECK_THROWS_AS(t.grad64(vc), Error);
}

TEST_CASE("tape and checker guard against misuse") {
  GradTape t;
  const Var vx = t.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS(t.grad64(vx), Error);       // backward has not run
  CHECK_THROWS_AS(t.scalar(vx), ShapeError);  // not a single value
  CHECK_THROWS_AS(t.backward(vx), ShapeError);
  CHECK_THROWS_AS(t.matmul(vx, t.leaf(Tensor({3, 3}))), ShapeError);
  CHECK_THROWS_AS(t.mse(vx, t.leaf(Tensor({0, 2}))), ShapeError);

  const Tensor x = Tensor::matrix(1, 1, {1.0f});
  const auto f = [](GradTape& tape, const std::vector<Var>& in) {
    return tape.sum_squares(in[0]);
  };
  CHECK_THROWS_AS(grad_check(f, {x}, 1e-6), ConfigError);
  CHECK_THROWS_AS(grad_check(f, {x}, 0.5), ConfigError);
}

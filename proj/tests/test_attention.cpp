#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mcaforge/attention.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/tape.hpp"
#include "mcaforge/tensor.hpp"

using namespace mcaforge;

namespace {

Tensor random_tensor(SplitMix64& rng, std::vector<std::size_t> shape, double lo = -1.5,
                     double hi = 1.5) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

BranchState random_state(SplitMix64& rng, BranchRole role, std::size_t tokens, std::size_t d) {
  return BranchState{role, random_tensor(rng, {tokens, d}), random_tensor(rng, {tokens, d}),
                     random_tensor(rng, {tokens, d}), 0, 0};
}

const std::vector<McaVariant> kAllVariants = {McaVariant::Self, McaVariant::ConcatK,
                                              McaVariant::ConcatKV, McaVariant::SwapK,
                                              McaVariant::SwapKV};

// Direct attention over an explicit key/value list, fully in double.
Tensor enumeration_oracle(const Tensor& q, const std::vector<std::vector<double>>& keys,
                          const std::vector<std::vector<double>>& vals) {
  const std::size_t m = q.rows(), d = q.cols(), n = keys.size();
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> w(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += static_cast<double>(q.at(i, p)) * keys[j][p];
      w[j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, w[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = std::exp(w[j] - mx);
      denom += w[j];
    }
    for (std::size_t p = 0; p < d; ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += (w[j] / denom) * vals[j][p];
      out.at(i, p) = static_cast<float>(acc);
    }
  }
  return out;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> r(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) r[i][j] = t.at(i, j);
  return r;
}

std::vector<std::vector<double>> cat(std::vector<std::vector<double>> a,
                                     const std::vector<std::vector<double>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("branch roles and variant names") {
  CHECK(opposite(BranchRole::Src) == BranchRole::Tar);
  CHECK(opposite(BranchRole::Tar) == BranchRole::Src);
  CHECK(opposite(opposite(BranchRole::Src)) == BranchRole::Src);
  CHECK(std::string(branch_name(BranchRole::Src)) == "src");
  CHECK(std::string(branch_name(BranchRole::Tar)) == "tar");

  for (McaVariant v : kAllVariants) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(!try_parse_variant("swapkv").has_value());
  CHECK_THROWS_AS(parse_variant("cross"), ConfigError);
}

TEST_CASE("resolve_context returns the documented pairs") {
  SplitMix64 rng(51);
  const BranchState own = random_state(rng, BranchRole::Src, 3, 4);
  const BranchState other = random_state(rng, BranchRole::Tar, 3, 4);

  SECTION("self keeps own context untouched") {
    auto [kbar, vbar] = resolve_context(McaVariant::Self, own, other);
    CHECK(bit_equal(kbar, own.k));
    CHECK(bit_equal(vbar, own.v));
  }
  SECTION("concat_kv concatenates both contexts") {
    auto [kbar, vbar] = resolve_context(McaVariant::ConcatKV, own, other);
    CHECK(bit_equal(kbar, concat_rows(own.k, other.k)));
    CHECK(bit_equal(vbar, concat_rows(own.v, other.v)));
  }
  SECTION("concat_kv with itself duplicates") {
    auto [kbar, vbar] = resolve_context(McaVariant::ConcatKV, own, own);
    CHECK(bit_equal(kbar, concat_rows(own.k, own.k)));
    CHECK(bit_equal(vbar, concat_rows(own.v, own.v)));
  }
  SECTION("concat_k pairs partner keys with own values by index") {
    auto [kbar, vbar] = resolve_context(McaVariant::ConcatK, own, other);
    CHECK(bit_equal(kbar, concat_rows(own.k, other.k)));
    CHECK(bit_equal(vbar, concat_rows(own.v, own.v)));
  }
  SECTION("swap variants substitute the partner context") {
    auto [k1, v1] = resolve_context(McaVariant::SwapK, own, other);
    CHECK(bit_equal(k1, other.k));
    CHECK(bit_equal(v1, own.v));
    auto [k2, v2] = resolve_context(McaVariant::SwapKV, own, other);
    CHECK(bit_equal(k2, other.k));
    CHECK(bit_equal(v2, other.v));
  }
  SECTION("kbar and vbar row counts always match") {
    for (McaVariant v : kAllVariants) {
      auto [kbar, vbar] = resolve_context(v, own, other);
      CHECK(kbar.rows() == vbar.rows());
    }
  }
}

TEST_CASE("single-token swap substitution") {
  BranchState own{BranchRole::Src, Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {1}),
                  Tensor::matrix(1, 1, {5}), 0, 0};
  BranchState other{BranchRole::Tar, Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {9}),
                    Tensor::matrix(1, 1, {7}), 0, 0};
  auto [kbar, vbar] = resolve_context(McaVariant::SwapKV, own, other);
  CHECK(kbar.at(0, 0) == 9.0f);
  CHECK(vbar.at(0, 0) == 7.0f);
  // Softmax over a single key is 1, so the value passes through.
  CHECK(mca_attention(own, other, McaVariant::SwapKV).at(0, 0) == 7.0f);
  CHECK(mca_attention(own, own, McaVariant::Self).at(0, 0) == 5.0f);
}

TEST_CASE("self variant equals plain scaled-dot-product attention bit for bit") {
  SplitMix64 rng(52);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t tokens = 1 + rng.below(8), d = 1 + rng.below(8);
    const BranchState own = random_state(rng, BranchRole::Src, tokens, d);
    const BranchState other = random_state(rng, BranchRole::Tar, tokens, d);
    const Tensor plain =
        matmul(softmax_rows(scale(matmul(own.q, transpose(own.k)),
                                  1.0 / std::sqrt(static_cast<double>(d)))),
               own.v);
    REQUIRE(bit_equal(mca_attention(own, other, McaVariant::Self), plain));
  }
}

TEST_CASE("identical-branch interactions collapse to self") {
  SplitMix64 rng(53);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t tokens = 1 + rng.below(8), d = 1 + rng.below(8);
    const BranchState own = random_state(rng, BranchRole::Src, tokens, d);
    const Tensor self_out = mca_attention(own, own, McaVariant::Self);
    // Swapping in an identical state is the identical computation.
    CHECK(bit_equal(mca_attention(own, own, McaVariant::SwapK), self_out));
    CHECK(bit_equal(mca_attention(own, own, McaVariant::SwapKV), self_out));
    // Duplicated keys halve each weight; duplicated values restore the sum.
    CHECK(max_abs_diff(mca_attention(own, own, McaVariant::ConcatKV), self_out) < 1e-6);
    CHECK(max_abs_diff(mca_attention(own, own, McaVariant::ConcatK), self_out) < 1e-6);
  }
}

TEST_CASE("concat_kv output matches a direct enumeration over concatenated context") {
  const Tensor q = Tensor::matrix(2, 1, {0, 1});
  const Tensor k = Tensor::matrix(2, 1, {0, 1});
  const Tensor v = Tensor::matrix(2, 1, {1, 2});
  const Tensor ko = Tensor::matrix(2, 1, {2, 3});
  const Tensor vo = Tensor::matrix(2, 1, {3, 4});
  const BranchState own{BranchRole::Src, q, k, v, 0, 0};
  const BranchState other{BranchRole::Tar, q, ko, vo, 0, 0};

  const Tensor got = mca_attention(own, other, McaVariant::ConcatKV);
  const Tensor want = enumeration_oracle(q, cat(rows_of(k), rows_of(ko)),
                                         cat(rows_of(v), rows_of(vo)));
  CHECK(max_abs_diff(got, want) < 1e-6);
}

TEST_CASE("every variant matches the enumeration oracle on random states") {
  SplitMix64 rng(54);
  McaOptions dup, drop;
  drop.concat_k_values = ConcatKValues::DropCross;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t tokens = 1 + rng.below(6), d = 1 + rng.below(6);
    const BranchState own = random_state(rng, BranchRole::Src, tokens, d);
    const BranchState other = random_state(rng, BranchRole::Tar, tokens, d);
    const auto kr = rows_of(own.k), vr = rows_of(own.v);
    const auto kro = rows_of(other.k), vro = rows_of(other.v);

    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::Self),
                       enumeration_oracle(own.q, kr, vr)) < 1e-6);
    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::ConcatKV),
                       enumeration_oracle(own.q, cat(kr, kro), cat(vr, vro))) < 1e-6);
    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::ConcatK, dup),
                       enumeration_oracle(own.q, cat(kr, kro), cat(vr, vr))) < 1e-6);
    const std::vector<std::vector<double>> zeros(tokens, std::vector<double>(d, 0.0));
    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::ConcatK, drop),
                       enumeration_oracle(own.q, cat(kr, kro), cat(vr, zeros))) < 1e-6);
    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::SwapK),
                       enumeration_oracle(own.q, kro, vr)) < 1e-6);
    CHECK(max_abs_diff(mca_attention(own, other, McaVariant::SwapKV),
                       enumeration_oracle(own.q, kro, vro)) < 1e-6);
  }
}

TEST_CASE("attention weight rows sum to one under every variant") {
  SplitMix64 rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t tokens = 1 + rng.below(8), d = 1 + rng.below(8);
    const BranchState own = random_state(rng, BranchRole::Src, tokens, d);
    const BranchState other = random_state(rng, BranchRole::Tar, tokens, d);
    for (McaVariant v : kAllVariants) {
      const Tensor w = mca_attention_weights(own, other, v);
      for (std::size_t i = 0; i < w.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j) {
          REQUIRE(w.at(i, j) >= 0.0f);
          s += w.at(i, j);
        }
        REQUIRE(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("output token count always equals the own branch's query count") {
  SplitMix64 rng(56);
  const BranchState own = random_state(rng, BranchRole::Src, 5, 3);
  const BranchState other_eq = random_state(rng, BranchRole::Tar, 5, 3);
  const BranchState other_neq = random_state(rng, BranchRole::Tar, 9, 3);
  for (McaVariant v : kAllVariants) {
    const Tensor out = mca_attention(own, other_eq, v);
    CHECK(out.rows() == 5);
    CHECK(out.cols() == 3);
  }
  // Variants that tolerate unequal token counts still emit own-count rows.
  McaOptions drop;
  drop.concat_k_values = ConcatKValues::DropCross;
  CHECK(mca_attention(own, other_neq, McaVariant::ConcatKV).rows() == 5);
  CHECK(mca_attention(own, other_neq, McaVariant::ConcatK, drop).rows() == 5);
}

TEST_CASE("token-count mismatches under swap variants raise policy errors naming the variant") {
  SplitMix64 rng(57);
  const BranchState own = random_state(rng, BranchRole::Src, 4, 3);
  const BranchState other = random_state(rng, BranchRole::Tar, 6, 3);
  for (McaVariant v : {McaVariant::SwapK, McaVariant::SwapKV, McaVariant::ConcatK}) {
    try {
      (void)mca_attention(own, other, v);
      FAIL("expected PolicyError");
    } catch (const PolicyError& e) {
      CHECK(std::string(e.what()).find(variant_name(v)) != std::string::npos);
    }
  }
  const BranchState bad_d = random_state(rng, BranchRole::Tar, 4, 5);
  CHECK_THROWS_AS(mca_attention(own, bad_d, McaVariant::SwapKV), ShapeError);
}

TEST_CASE("concat_kv is invariant under consistent permutation of the partner tokens") {
  SplitMix64 rng(58);
  const BranchState own = random_state(rng, BranchRole::Src, 6, 4);
  BranchState other = random_state(rng, BranchRole::Tar, 6, 4);
  const Tensor base = mca_attention(own, other, McaVariant::ConcatKV);

  // Rotate the partner's keys and values by the same offset.
  const std::size_t n = other.k.rows();
  Tensor pk({n, 4}), pv({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      pk.at(i, j) = other.k.at((i + 2) % n, j);
      pv.at(i, j) = other.v.at((i + 2) % n, j);
    }
  }
  other.k = pk;
  other.v = pv;
  CHECK(max_abs_diff(mca_attention(own, other, McaVariant::ConcatKV), base) < 1e-6);
}

TEST_CASE("multi-head with self variants equals independent per-branch attention") {
  SplitMix64 rng(59);
  const std::size_t tokens = 6, width = 12, heads = 3;
  const Tensor src = random_tensor(rng, {tokens, width});
  const Tensor tar = random_tensor(rng, {tokens, width});
  const MhaWeights w{random_tensor(rng, {width, width}), random_tensor(rng, {width, width}),
                     random_tensor(rng, {width, width}), random_tensor(rng, {width, width})};

  const MhaOutputs joint = multi_head_mca(src, tar, w, heads, McaVariant::Self, McaVariant::Self);
  CHECK(bit_equal(joint.src, multi_head_self(src, w, heads)));
  CHECK(bit_equal(joint.tar, multi_head_self(tar, w, heads)));
}

TEST_CASE("multi-head swap on identical branch inputs is a no-op") {
  SplitMix64 rng(60);
  const Tensor tokens = random_tensor(rng, {5, 8});
  const MhaWeights w{random_tensor(rng, {8, 8}), random_tensor(rng, {8, 8}),
                     random_tensor(rng, {8, 8}), random_tensor(rng, {8, 8})};
  const MhaOutputs self_out =
      multi_head_mca(tokens, tokens, w, 2, McaVariant::Self, McaVariant::Self);
  const MhaOutputs swap_out =
      multi_head_mca(tokens, tokens, w, 2, McaVariant::SwapKV, McaVariant::SwapKV);
  CHECK(max_abs_diff(swap_out.src, self_out.src) < 1e-6);
  CHECK(max_abs_diff(swap_out.tar, self_out.tar) < 1e-6);
}

TEST_CASE("multi-head swap_kv matches a crossed-state oracle") {
  SplitMix64 rng(61);
  const std::size_t tokens = 5, width = 8, heads = 2, dh = width / heads;
  const Tensor src = random_tensor(rng, {tokens, width});
  const Tensor tar = random_tensor(rng, {tokens, width});
  const MhaWeights w{random_tensor(rng, {width, width}), random_tensor(rng, {width, width}),
                     random_tensor(rng, {width, width}), random_tensor(rng, {width, width})};

  const MhaOutputs joint =
      multi_head_mca(src, tar, w, heads, McaVariant::SwapKV, McaVariant::SwapKV);

  // Oracle: the src branch queries its own Q against tar's K and V per head.
  const Tensor qs = matmul(src, w.wq), kt = matmul(tar, w.wk), vt = matmul(tar, w.wv);
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dh, e = (h + 1) * dh;
    const Tensor wts = softmax_rows(scale(matmul(slice_cols(qs, b, e), transpose(slice_cols(kt, b, e))),
                                          1.0 / std::sqrt(static_cast<double>(dh))));
    outs.push_back(matmul(wts, slice_cols(vt, b, e)));
  }
  CHECK(bit_equal(joint.src, matmul(concat_cols(outs), w.wo)));
}

TEST_CASE("multi-head rejects widths not divisible by the head count") {
  SplitMix64 rng(62);
  const Tensor tokens = random_tensor(rng, {4, 10});
  const MhaWeights w{random_tensor(rng, {10, 10}), random_tensor(rng, {10, 10}),
                     random_tensor(rng, {10, 10}), random_tensor(rng, {10, 10})};
  CHECK_THROWS_AS(multi_head_self(tokens, w, 3), ConfigError);
  CHECK_THROWS_AS(multi_head_mca(tokens, tokens, w, 4, McaVariant::Self, McaVariant::Self),
                  ConfigError);
  CHECK_THROWS_AS(multi_head_self(tokens, w, 0), ConfigError);
}

TEST_CASE("gradients flow correctly through every variant") {
  SplitMix64 rng(63);
  McaOptions drop;
  drop.concat_k_values = ConcatKValues::DropCross;
  for (McaVariant variant : kAllVariants) {
    for (int trial = 0; trial < 2; ++trial) {
      std::vector<Tensor> inputs;
      for (int i = 0; i < 6; ++i) inputs.push_back(random_tensor(rng, {3, 4}));
      const auto build = [&](GradTape& t, const std::vector<Var>& in) {
        const BranchVars own{BranchRole::Src, in[0], in[1], in[2]};
        const BranchVars other{BranchRole::Tar, in[3], in[4], in[5]};
        return t.sum_squares(mca_attention(t, own, other, variant));
      };
      const double worst = grad_check(build, inputs);
      INFO("variant " << variant_name(variant));
      REQUIRE(worst < 1e-4);
    }
  }
  // The concat_k damped mode is differentiable too.
  std::vector<Tensor> inputs;
  for (int i = 0; i < 6; ++i) inputs.push_back(random_tensor(rng, {3, 4}));
  const double worst = grad_check(
      [&](GradTape& t, const std::vector<Var>& in) {
        const BranchVars own{BranchRole::Src, in[0], in[1], in[2]};
        const BranchVars other{BranchRole::Tar, in[3], in[4], in[5]};
        return t.sum_squares(mca_attention(t, own, other, McaVariant::ConcatK, drop));
      },
      inputs);
  CHECK(worst < 1e-4);
}

TEST_CASE("tape multi-head forward agrees with the tensor-domain layer within tolerance") {
  SplitMix64 rng(64);
  const std::size_t tokens = 5, width = 8, heads = 2;
  const Tensor src = random_tensor(rng, {tokens, width});
  const Tensor tar = random_tensor(rng, {tokens, width});
  const MhaWeights w{random_tensor(rng, {width, width}), random_tensor(rng, {width, width}),
                     random_tensor(rng, {width, width}), random_tensor(rng, {width, width})};

  const MhaOutputs plain =
      multi_head_mca(src, tar, w, heads, McaVariant::ConcatKV, McaVariant::SwapK);

  GradTape t;
  const MhaWeightVars wv{t.leaf(w.wq), t.leaf(w.wk), t.leaf(w.wv), t.leaf(w.wo)};
  const MhaOutputVars out = multi_head_mca(t, t.leaf(src), t.leaf(tar), wv, heads,
                                           McaVariant::ConcatKV, McaVariant::SwapK);
  // The tape chains in higher precision, so outputs agree only to float noise.
  CHECK(max_abs_diff(t.value(out.src), plain.src) < 1e-4);
  CHECK(max_abs_diff(t.value(out.tar), plain.tar) < 1e-4);
}

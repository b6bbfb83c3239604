#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcaforge/error.hpp"
#include "mcaforge/tape.hpp"
#include "mcaforge/tensor.hpp"

namespace mcaforge {

// The two clips of an editing pair are denoised side by side; every state
// and schedule rule is tagged with the branch it belongs to.
enum class BranchRole { Src, Tar };

inline BranchRole opposite(BranchRole r) {
  return r == BranchRole::Src ? BranchRole::Tar : BranchRole::Src;
}

inline const char* branch_name(BranchRole r) { return r == BranchRole::Src ? "src" : "tar"; }

// How one branch's attention sees the other branch at a given layer/step.
// Self reads only its own keys/values; the others splice in the partner's.
enum class McaVariant { Self, ConcatK, ConcatKV, SwapK, SwapKV };

inline const char* variant_name(McaVariant v) {
  switch (v) {
    case McaVariant::Self: return "self";
    case McaVariant::ConcatK: return "concat_k";
    case McaVariant::ConcatKV: return "concat_kv";
    case McaVariant::SwapK: return "swap_k";
    case McaVariant::SwapKV: return "swap_kv";
  }
  return "self";
}

inline std::optional<McaVariant> try_parse_variant(std::string_view s) {
  if (s == "self") return McaVariant::Self;
  if (s == "concat_k") return McaVariant::ConcatK;
  if (s == "concat_kv") return McaVariant::ConcatKV;
  if (s == "swap_k") return McaVariant::SwapK;
  if (s == "swap_kv") return McaVariant::SwapKV;
  return std::nullopt;
}

inline McaVariant parse_variant(std::string_view s) {
  if (auto v = try_parse_variant(s)) return *v;
  throw ConfigError("unknown attention variant '" + std::string(s) +
                    "' (expected self, concat_k, concat_kv, swap_k or swap_kv)");
}

// ConcatK widens the key set with the partner's keys but the own branch has
// no values for those extra columns. DuplicateOwn pairs the partner's key at
// index i with the own value at index i (requires equal token counts);
// DropCross keeps the widened softmax denominator but sends the extra
// columns to zero vectors, damping the row mass instead of retargeting it.
enum class ConcatKValues { DuplicateOwn, DropCross };

struct McaOptions {
  ConcatKValues concat_k_values = ConcatKValues::DuplicateOwn;
};

// One branch's per-head attention inputs at a given layer and step.
struct BranchState {
  BranchRole role = BranchRole::Src;
  Tensor q, k, v;  // [tokens, d] each
  std::size_t layer = 0;
  std::size_t step = 0;

  std::size_t tokens() const { return q.rows(); }
  std::size_t head_dim() const { return q.cols(); }

  void validate() const {
    detail::require_2d(q, "branch state q");
    detail::require_2d(k, "branch state k");
    detail::require_2d(v, "branch state v");
    if (q.cols() != k.cols() || q.cols() != v.cols() || k.rows() != q.rows() ||
        v.rows() != q.rows()) {
      throw ShapeError("branch state: q, k, v must share token count and head dimension");
    }
    if (q.rows() == 0 || q.cols() == 0) {
      throw ShapeError("branch state: token count and head dimension must be positive");
    }
  }
};

namespace detail {

inline void check_context_pair(McaVariant variant, const BranchState& own,
                               const BranchState& other, const McaOptions& opts) {
  own.validate();
  if (variant == McaVariant::Self) return;
  other.validate();
  if (own.head_dim() != other.head_dim()) {
    throw ShapeError("branch head dimensions differ: " + std::to_string(own.head_dim()) +
                     " vs " + std::to_string(other.head_dim()));
  }
  const bool needs_equal_tokens =
      variant == McaVariant::SwapK || variant == McaVariant::SwapKV ||
      (variant == McaVariant::ConcatK && opts.concat_k_values == ConcatKValues::DuplicateOwn);
  if (needs_equal_tokens && own.tokens() != other.tokens()) {
    throw PolicyError(std::string(variant_name(variant)) + ": branch token counts differ (" +
                      std::to_string(own.tokens()) + " vs " + std::to_string(other.tokens()) +
                      ")");
  }
}

}  // namespace detail

// Materializes the effective key/value context (kbar, vbar) a branch
// attends over. The returned pair always has equal row counts.
inline std::pair<Tensor, Tensor> resolve_context(McaVariant variant, const BranchState& own,
                                                 const BranchState& other,
                                                 const McaOptions& opts = {}) {
  detail::check_context_pair(variant, own, other, opts);
  switch (variant) {
    case McaVariant::Self:
      return {own.k, own.v};
    case McaVariant::ConcatK: {
      Tensor kbar = concat_rows(own.k, other.k);
      Tensor vtail = opts.concat_k_values == ConcatKValues::DuplicateOwn
                         ? own.v
                         : Tensor({other.tokens(), own.head_dim()});
      return {std::move(kbar), concat_rows(own.v, vtail)};
    }
    case McaVariant::ConcatKV:
      return {concat_rows(own.k, other.k), concat_rows(own.v, other.v)};
    case McaVariant::SwapK:
      return {other.k, own.v};
    case McaVariant::SwapKV:
      return {other.k, other.v};
  }
  throw ConfigError("unhandled attention variant");
}

// Scaled dot-product attention weights over the resolved context:
// softmax(Q kbar^T / sqrt(d)), one row per own-branch query token.
inline Tensor mca_attention_weights(const BranchState& own, const BranchState& other,
                                    McaVariant variant, const McaOptions& opts = {}) {
  auto [kbar, vbar] = resolve_context(variant, own, other, opts);
  (void)vbar;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(own.head_dim()));
  return softmax_rows(scale(matmul(own.q, transpose(kbar)), inv_sqrt_d));
}

// Attention output for one branch under a variant; shape [own tokens, d].
inline Tensor mca_attention(const BranchState& own, const BranchState& other, McaVariant variant,
                            const McaOptions& opts = {}) {
  auto [kbar, vbar] = resolve_context(variant, own, other, opts);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(own.head_dim()));
  const Tensor weights = softmax_rows(scale(matmul(own.q, transpose(kbar)), inv_sqrt_d));
  return matmul(weights, vbar);
}

// ---- differentiable (tape) forms -----------------------------------------

struct BranchVars {
  BranchRole role = BranchRole::Src;
  Var q, k, v;
};

inline std::pair<Var, Var> resolve_context(GradTape& t, McaVariant variant, const BranchVars& own,
                                           const BranchVars& other, const McaOptions& opts = {}) {
  BranchState own_s{own.role, t.value(own.q), t.value(own.k), t.value(own.v), 0, 0};
  BranchState other_s;
  if (variant != McaVariant::Self) {
    other_s = BranchState{other.role, t.value(other.q), t.value(other.k), t.value(other.v), 0, 0};
  } else {
    other_s = own_s;
  }
  detail::check_context_pair(variant, own_s, other_s, opts);
  switch (variant) {
    case McaVariant::Self:
      return {own.k, own.v};
    case McaVariant::ConcatK: {
      const Var kbar = t.concat_rows(own.k, other.k);
      const Var vtail = opts.concat_k_values == ConcatKValues::DuplicateOwn
                            ? own.v
                            : t.constant(Tensor({other_s.tokens(), own_s.head_dim()}));
      return {kbar, t.concat_rows(own.v, vtail)};
    }
    case McaVariant::ConcatKV:
      return {t.concat_rows(own.k, other.k), t.concat_rows(own.v, other.v)};
    case McaVariant::SwapK:
      return {other.k, own.v};
    case McaVariant::SwapKV:
      return {other.k, other.v};
  }
  throw ConfigError("unhandled attention variant");
}

inline Var mca_attention(GradTape& t, const BranchVars& own, const BranchVars& other,
                         McaVariant variant, const McaOptions& opts = {}) {
  auto [kbar, vbar] = resolve_context(t, variant, own, other, opts);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(t.value(own.q).cols()));
  const Var weights = t.softmax_rows(t.matmul_nt(own.q, kbar, inv_sqrt_d));
  return t.matmul(weights, vbar);
}

// ---- multi-head layer ------------------------------------------------------

// One attention layer's projections; both branches share them (the pair is
// denoised by a single backbone). Width is partitioned into equal head
// slices column-wise.
struct MhaWeights {
  Tensor wq, wk, wv, wo;  // each [width, width]
};

namespace detail {

inline std::size_t check_mha(std::size_t width, std::size_t heads) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  return width / heads;
}

}  // namespace detail

// Standard multi-head self-attention for a single branch.
inline Tensor multi_head_self(const Tensor& tokens, const MhaWeights& w, std::size_t heads) {
  const std::size_t width = tokens.cols();
  const std::size_t dh = detail::check_mha(width, heads);
  const Tensor q = matmul(tokens, w.wq), k = matmul(tokens, w.wk), v = matmul(tokens, w.wv);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dh, e = (h + 1) * dh;
    BranchState s{BranchRole::Src, slice_cols(q, b, e), slice_cols(k, b, e), slice_cols(v, b, e),
                  0, 0};
    outs.push_back(mca_attention(s, s, McaVariant::Self));
  }
  return matmul(concat_cols(outs), w.wo);
}

struct MhaOutputs {
  Tensor src, tar;
};

// Joint two-branch multi-head attention: each branch's heads resolve their
// context against the other branch under that branch's assigned variant.
// Both branches are evaluated in one call so neither can observe a
// partially updated partner.
inline MhaOutputs multi_head_mca(const Tensor& src_tokens, const Tensor& tar_tokens,
                                 const MhaWeights& w, std::size_t heads, McaVariant src_variant,
                                 McaVariant tar_variant, const McaOptions& opts = {}) {
  if (src_tokens.cols() != tar_tokens.cols()) {
    throw ShapeError("branch widths differ: " + std::to_string(src_tokens.cols()) + " vs " +
                     std::to_string(tar_tokens.cols()));
  }
  const std::size_t width = src_tokens.cols();
  const std::size_t dh = detail::check_mha(width, heads);

  const Tensor qs = matmul(src_tokens, w.wq), ks = matmul(src_tokens, w.wk),
               vs = matmul(src_tokens, w.wv);
  const Tensor qt = matmul(tar_tokens, w.wq), kt = matmul(tar_tokens, w.wk),
               vt = matmul(tar_tokens, w.wv);

  std::vector<Tensor> src_outs, tar_outs;
  src_outs.reserve(heads);
  tar_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dh, e = (h + 1) * dh;
    const BranchState src_state{BranchRole::Src, slice_cols(qs, b, e), slice_cols(ks, b, e),
                                slice_cols(vs, b, e), 0, 0};
    const BranchState tar_state{BranchRole::Tar, slice_cols(qt, b, e), slice_cols(kt, b, e),
                                slice_cols(vt, b, e), 0, 0};
    src_outs.push_back(mca_attention(src_state, tar_state, src_variant, opts));
    tar_outs.push_back(mca_attention(tar_state, src_state, tar_variant, opts));
  }
  return {matmul(concat_cols(src_outs), w.wo), matmul(concat_cols(tar_outs), w.wo)};
}

struct MhaWeightVars {
  Var wq, wk, wv, wo;
};

// Single-branch multi-head self-attention on the tape. Computes exactly the
// per-branch node values the joint form produces under (Self, Self).
inline Var multi_head_self(GradTape& t, Var tokens, const MhaWeightVars& w, std::size_t heads) {
  const std::size_t width = t.value(tokens).cols();
  const std::size_t dh = detail::check_mha(width, heads);
  const Var q = t.matmul(tokens, w.wq), k = t.matmul(tokens, w.wk), v = t.matmul(tokens, w.wv);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dh, e = (h + 1) * dh;
    const BranchVars s{BranchRole::Src, t.slice_cols(q, b, e), t.slice_cols(k, b, e),
                       t.slice_cols(v, b, e)};
    outs.push_back(mca_attention(t, s, s, McaVariant::Self));
  }
  return t.matmul(t.concat_cols(outs), w.wo);
}

struct MhaOutputVars {
  Var src, tar;
};

inline MhaOutputVars multi_head_mca(GradTape& t, Var src_tokens, Var tar_tokens,
                                    const MhaWeightVars& w, std::size_t heads,
                                    McaVariant src_variant, McaVariant tar_variant,
                                    const McaOptions& opts = {}) {
  if (t.value(src_tokens).cols() != t.value(tar_tokens).cols()) {
    throw ShapeError("branch widths differ");
  }
  const std::size_t width = t.value(src_tokens).cols();
  const std::size_t dh = detail::check_mha(width, heads);

  const Var qs = t.matmul(src_tokens, w.wq), ks = t.matmul(src_tokens, w.wk),
            vs = t.matmul(src_tokens, w.wv);
  const Var qt = t.matmul(tar_tokens, w.wq), kt = t.matmul(tar_tokens, w.wk),
            vt = t.matmul(tar_tokens, w.wv);

  std::vector<Var> src_outs, tar_outs;
  src_outs.reserve(heads);
  tar_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dh, e = (h + 1) * dh;
    const BranchVars src_state{BranchRole::Src, t.slice_cols(qs, b, e), t.slice_cols(ks, b, e),
                               t.slice_cols(vs, b, e)};
    const BranchVars tar_state{BranchRole::Tar, t.slice_cols(qt, b, e), t.slice_cols(kt, b, e),
                               t.slice_cols(vt, b, e)};
    src_outs.push_back(mca_attention(t, src_state, tar_state, src_variant, opts));
    tar_outs.push_back(mca_attention(t, tar_state, src_state, tar_variant, opts));
  }
  return {t.matmul(t.concat_cols(src_outs), w.wo), t.matmul(t.concat_cols(tar_outs), w.wo)};
}

}  // namespace mcaforge

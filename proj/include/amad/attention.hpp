#pragma once

// Multi-head self-attention and the augmented variant whose keys and values
// are the concatenation of target (Y) and exemplar (X) tokens.

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "amad/numeric/ops.hpp"

namespace amad {

struct AttnLayerCfg {
  std::size_t layer = 0;  // L in [0, 9]
  std::size_t d = 32;
  std::size_t m = 2;
  std::size_t h = 8, w = 8;
  bool augmented = true;
  bool adapted = false;

  std::size_t tokens() const { return h * w; }
  std::size_t head_dim() const { return d / m; }

  void validate() const {
    if (m == 0 || d % m != 0) {
      throw ConfigError("attention L" + std::to_string(layer) + ": d=" + std::to_string(d) +
                        " not divisible by m=" + std::to_string(m));
    }
    if (adapted && !augmented) throw ConfigError("attention L" + std::to_string(layer) + ": adapted requires augmented");
    if (layer == 0 && adapted) throw ConfigError("attention L0 is never adapted");
    if (layer > 9) throw ConfigError("attention layer index out of range: " + std::to_string(layer));
  }
};

/// [n, d] -> [m, n, d/m]
inline Tensor split_heads(const Tensor& x, std::size_t m) {
  if (x.rank() != 2 || m == 0 || x.dim(1) % m != 0) {
    throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(m) + " heads");
  }
  const std::size_t n = x.dim(0), dh = x.dim(1) / m;
  return permute(reshape(x, {n, m, dh}), {1, 0, 2});
}

/// [m, n, d/m] -> [n, d]
inline Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("merge_heads expects [m, n, dh], got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1), dh = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {n, m * dh});
}

/// Per-head logits Q K^T / sqrt(d/m); q, k are [m, n, dh].
inline Tensor attention_logits(const Tensor& q, const Tensor& k) {
  return scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(2))));
}

/// Q, K, V are [h*w, d]; returns [h*w, d].
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnLayerCfg& cfg) {
  cfg.validate();
  if (q.rank() != 2 || q.dim(1) != cfg.d || k.shape() != v.shape() || k.dim(1) != cfg.d) {
    throw ShapeError("self_attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                     shape_str(v.shape()) + " inconsistent with d=" + std::to_string(cfg.d));
  }
  const Tensor qh = split_heads(q, cfg.m), kh = split_heads(k, cfg.m), vh = split_heads(v, cfg.m);
  return merge_heads(matmul(softmax_lastdim(attention_logits(qh, kh)), vh));
}

/// Per-head projections and split logits of one augmented attention call.
struct AttnState {
  Tensor qy, ky, vy, kx, vx;  // [m, n, dh]
  Tensor a_yy, a_yx;          // [m, n, n]
  int t = 0;

  std::size_t heads() const { return qy.dim(0); }
  std::size_t tokens() const { return qy.dim(1); }
};

/// Builds the state from token-major [n, d] projections.
inline AttnState make_attn_state(const Tensor& qy, const Tensor& ky, const Tensor& vy, const Tensor& kx,
                                 const Tensor& vx, const AttnLayerCfg& cfg, int t = 0) {
  cfg.validate();
  for (const Tensor* x : {&qy, &ky, &vy, &kx, &vx}) {
    if (x->rank() != 2 || x->dim(0) != cfg.tokens() || x->dim(1) != cfg.d) {
      throw ShapeError("attention L" + std::to_string(cfg.layer) + ": expected [" + std::to_string(cfg.tokens()) + ", " +
                       std::to_string(cfg.d) + "], got " + shape_str(x->shape()));
    }
  }
  AttnState s;
  s.qy = split_heads(qy, cfg.m);
  s.ky = split_heads(ky, cfg.m);
  s.vy = split_heads(vy, cfg.m);
  s.kx = split_heads(kx, cfg.m);
  s.vx = split_heads(vx, cfg.m);
  s.a_yy = attention_logits(s.qy, s.ky);
  s.a_yx = attention_logits(s.qy, s.kx);
  s.t = t;
  return s;
}

/// Full logits over the concatenated (Y then X) key axis: [m, n, 2n].
inline Tensor concat_logits(const Tensor& a_yy, const Tensor& a_yx) { return concat({a_yy, a_yx}, 2); }

inline std::pair<Tensor, Tensor> split_logits(const Tensor& full) {
  if (full.rank() != 3 || full.dim(2) % 2 != 0) throw ShapeError("split_logits: bad shape " + shape_str(full.shape()));
  const std::size_t n = full.dim(2) / 2;
  return {slice(full, 2, 0, n), slice(full, 2, n, 2 * n)};
}

inline std::pair<Tensor, Tensor> split_logits(const AttnState& s) { return {s.a_yy, s.a_yx}; }

/// Softmax weights over the concatenated axis, with the Y->X block optionally
/// replaced by refined logits.
inline Tensor augmented_weights(const AttnState& s, const std::optional<Tensor>& refined = std::nullopt) {
  if (refined && refined->shape() != s.a_yx.shape()) {
    throw ShapeError("refined logits " + shape_str(refined->shape()) + " do not match " + shape_str(s.a_yx.shape()));
  }
  return softmax_lastdim(concat_logits(s.a_yy, refined ? *refined : s.a_yx));
}

/// Returns [n, d]; without refined logits this is plain augmented attention.
inline Tensor augmented_attention(const AttnState& s, const std::optional<Tensor>& refined = std::nullopt) {
  return merge_heads(matmul(augmented_weights(s, refined), concat({s.vy, s.vx}, 1)));
}

}  // namespace amad

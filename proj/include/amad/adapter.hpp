#pragma once

// Matching-cost adapter: refines the exemplar block of the attention logits
// from the stacked implicit and categorical costs with a small residual
// network of separable 4-D convolutions.

#include <random>
#include <string>
#include <vector>

#include "amad/numeric/ops.hpp"
#include "amad/numeric/param_set.hpp"
#include "amad/segcost.hpp"

namespace amad {

struct AdapterConfig {
  std::size_t heads = 2;  // m
  std::size_t c_mid = 8;
  /// Shares one (A_h, C) -> 1 network across heads instead of mixing heads.
  bool grouped = false;
  std::size_t first_layer = 1, last_layer = 9;

  std::size_t in_channels() const { return grouped ? 2 : heads + 1; }
  std::size_t out_channels() const { return grouped ? 1 : heads; }
};

inline std::string adapter_prefix(std::size_t layer) { return "adapter.L" + std::to_string(layer) + "."; }

/// Registers the two conv stages of every adapted layer. The second stage is
/// zero so the refinement starts as the identity.
inline void init_adapter(ParamSet& ps, const AdapterConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t L = cfg.first_layer; L <= cfg.last_layer; ++L) {
    const std::string p = adapter_prefix(L);
    const std::size_t ci = cfg.in_channels(), cm = cfg.c_mid, co = cfg.out_channels();
    const double std0 = 1.0 / std::sqrt(static_cast<double>(ci * 9 * 2));
    ps.add(p + "s0.kl", Tensor::randn({cm, ci, 3, 3}, rng, std0));
    ps.add(p + "s0.ij", Tensor::randn({cm, ci, 3, 3}, rng, std0));
    ps.add(p + "s0.b", Tensor({cm}));
    ps.add(p + "s1.kl", Tensor({co, cm, 3, 3}));
    ps.add(p + "s1.ij", Tensor({co, cm, 3, 3}));
    ps.add(p + "s1.b", Tensor({co}));
  }
}

/// Weight handles of one adapted layer.
struct AdapterLayer {
  Tensor s0_kl, s0_ij, s0_b, s1_kl, s1_ij, s1_b;
  bool grouped = false;

  static AdapterLayer from(const ParamSet& ps, std::size_t layer, std::size_t heads) {
    const std::string p = adapter_prefix(layer);
    AdapterLayer a{ps.at(p + "s0.kl"), ps.at(p + "s0.ij"), ps.at(p + "s0.b"),
                   ps.at(p + "s1.kl"), ps.at(p + "s1.ij"), ps.at(p + "s1.b"), false};
    const std::size_t ci = a.s0_kl.dim(1), co = a.s1_kl.dim(0);
    if (ci == heads + 1 && co == heads) {
      a.grouped = false;
    } else if (ci == 2 && co == 1) {
      a.grouped = true;
    } else {
      throw ShapeError("adapter L" + std::to_string(layer) + " weights " + shape_str(a.s0_kl.shape()) + " / " +
                       shape_str(a.s1_kl.shape()) + " do not fit " + std::to_string(heads) + " heads");
    }
    return a;
  }
};

/// Stacks the implicit logits [m, h, w, h', w'] and the categorical cost as
/// one extra channel: [m+1, h, w, h', w'].
inline Tensor build_R(const Tensor& a, const CatCost& c) {
  if (a.rank() != 5 || a.dim(1) != c.h || a.dim(2) != c.w || a.dim(3) != c.hx || a.dim(4) != c.wx) {
    throw ShapeError("cost block " + shape_str(a.shape()) + " does not match categorical cost [" + std::to_string(c.h) +
                     "," + std::to_string(c.w) + "," + std::to_string(c.hx) + "," + std::to_string(c.wx) + "]");
  }
  return concat({a, c.as_tensor()}, 0);
}

namespace detail {

/// One separable 4-D stage on x [G, c, h*w, h'*w']: a 3x3 conv over the
/// exemplar plane for every target pixel plus a 3x3 conv over the target
/// plane for every exemplar pixel, summed, plus bias.
inline Tensor cp4d_stage(const Tensor& x, std::size_t h, std::size_t w, std::size_t hx, std::size_t wx,
                         const Tensor& k_kl, const Tensor& k_ij, const Tensor& b) {
  const std::size_t G = x.dim(0), c = x.dim(1), n = h * w, nx = hx * wx, co = k_kl.dim(0);
  const Conv2dOptions same{1, 1};
  Tensor u = reshape(permute(x, {0, 2, 1, 3}), {G * n, c, hx, wx});
  u = conv2d(u, k_kl, std::nullopt, same);
  u = permute(reshape(u, {G, n, co, nx}), {0, 2, 1, 3});
  Tensor v = reshape(permute(x, {0, 3, 1, 2}), {G * nx, c, h, w});
  v = conv2d(v, k_ij, std::nullopt, same);
  v = permute(reshape(v, {G, nx, co, n}), {0, 2, 3, 1});
  return add(add(u, v), reshape(b, {1, co, 1, 1}));
}

}  // namespace detail

/// Two-stage network with a softplus between stages; R is [m+1, h, w, h', w'],
/// output [m, h, w, h', w'].
inline Tensor phi_forward(const Tensor& r, const AdapterLayer& p) {
  if (r.rank() != 5) throw ShapeError("phi_forward expects [m+1,h,w,h',w'], got " + shape_str(r.shape()));
  const std::size_t m = r.dim(0) - 1, h = r.dim(1), w = r.dim(2), hx = r.dim(3), wx = r.dim(4);
  const std::size_t n = h * w, nx = hx * wx;
  Tensor x;
  if (p.grouped) {
    // Each head sees (A_h, C) through the same weights.
    const Tensor flat = reshape(r, {m + 1, 1, n, nx});
    const Tensor cat = slice(flat, 0, m, m + 1);
    std::vector<Tensor> parts;
    for (std::size_t hd = 0; hd < m; ++hd) parts.push_back(concat({slice(flat, 0, hd, hd + 1), cat}, 1));
    x = concat(parts, 0);
  } else {
    x = reshape(r, {1, m + 1, n, nx});
  }
  if (x.dim(1) != p.s0_kl.dim(1)) throw ShapeError("adapter input channels do not match weights");
  Tensor hid = softplus(detail::cp4d_stage(x, h, w, hx, wx, p.s0_kl, p.s0_ij, p.s0_b));
  Tensor out = detail::cp4d_stage(hid, h, w, hx, wx, p.s1_kl, p.s1_ij, p.s1_b);
  return reshape(out, {m, h, w, hx, wx});
}

/// Residual refinement O = phi(R) + A. `a` is [m, n, n'] logits; the result
/// has the same shape.
inline Tensor refine(const Tensor& a, const CatCost& c, const AdapterLayer& p) {
  const std::size_t m = a.dim(0);
  const Tensor a5 = reshape(a, {m, c.h, c.w, c.hx, c.wx});
  return add(reshape(phi_forward(build_R(a5, c), p), a.shape()), a);
}

/// Ablation without learning: logits at C = 0 are pushed to -1e9 on rows
/// that have at least one admissible column.
inline Tensor refine_categorical_only(const Tensor& a, const CatCost& c) {
  const std::size_t rows = c.rows(), cols = c.cols();
  if (a.numel() % (rows * cols) != 0 || a.shape().back() != cols) {
    throw ShapeError("logits " + shape_str(a.shape()) + " do not match categorical cost");
  }
  std::vector<double> bias(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* cr = c.values.data() + r * cols;
    bool any = false;
    for (std::size_t q = 0; q < cols; ++q) any = any || cr[q] != 0.0;
    if (!any) continue;
    for (std::size_t q = 0; q < cols; ++q) {
      if (cr[q] == 0.0) bias[r * cols + q] = -1e9;
    }
  }
  return add(a, Tensor({rows, cols}, std::move(bias)));
}

}  // namespace amad

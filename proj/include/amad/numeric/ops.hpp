#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "amad/numeric/tensor.hpp"

namespace amad {

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // aligned to out, 0 on broadcast axes
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t eb = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(ea, eb);
    if (ea != 1) p.stride_a[i] = sa[i + a.size() - r];
    if (eb != 1) p.stride_b[i] = sb[i + b.size() - r];
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_numel(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < p.out[d]) {
        ia += p.stride_a[d];
        ib += p.stride_b[d];
        break;
      }
      ia -= p.stride_a[d] * (p.out[d] - 1);
      ib -= p.stride_b[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const auto& va = a.values();
  const auto& vb = b.values();
  auto apply = [op](double x, double y) {
    switch (op) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      default: return x * y;
    }
  };
  if (a.shape() == b.shape()) {
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(va[i], vb[i]);
    return make_result(a.shape(), std::move(out), {a, b}, [op](Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto& g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (pa.requires_grad) pa.grad[i] += op == BinOp::Mul ? g[i] * pb.value[i] : g[i];
        if (pb.requires_grad) {
          pb.grad[i] += op == BinOp::Mul ? g[i] * pa.value[i] : (op == BinOp::Sub ? -g[i] : g[i]);
        }
      }
    }, name);
  }
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(shape_numel(plan.out));
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = apply(va[ia], vb[ib]); });
  Shape out_shape = plan.out;
  return make_result(std::move(out_shape), std::move(out), {a, b}, [op, plan](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (pa.requires_grad) pa.grad[ia] += op == BinOp::Mul ? g[o] * pb.value[ib] : g[o];
      if (pb.requires_grad) {
        pb.grad[ib] += op == BinOp::Mul ? g[o] * pa.value[ia] : (op == BinOp::Sub ? -g[o] : g[o]);
      }
    });
  }, name);
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv, const char* name) {
  const auto& va = a.values();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  }, name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// Elementwise sum with numpy-style broadcasting.
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Mul, "mul"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; }, "scale");
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; }, "add_scalar");
}

inline Tensor silu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      },
      "silu");
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); }, "softplus");
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_result(Shape{1}, {s}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  }, "sum");
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Mean squared error between equally shaped tensors.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(square(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Layout

/// Same values in a new shape. Always copies.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), a.values(), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  }, "reshape");
}

/// Output axis i is input axis axes[i].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute axes do not match rank of " + shape_str(a.shape()));
  std::vector<bool> used(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || used[axes[i]]) throw ShapeError("permute axes are not a permutation");
    used[axes[i]] = true;
    out_shape[i] = a.shape()[axes[i]];
  }
  const auto in_strides = detail::row_major_strides(a.shape());
  detail::BroadcastPlan plan;  // reuse the strided walker: stride_a = gather strides
  plan.out = out_shape;
  plan.stride_a.resize(r);
  plan.stride_b.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) plan.stride_a[i] = in_strides[axes[i]];
  const auto& va = a.values();
  std::vector<double> out(va.size());
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = va[ia]; });
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [plan](detail::Node& self) {
    auto& p = *self.parents[0];
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { p.grad[ia] += self.grad[o]; });
  }, "permute");
}

/// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && t.shape()[d] != ref[d]) {
        throw ShapeError("concat extent mismatch " + shape_str(ref) + " vs " + shape_str(t.shape()));
      }
    }
    out_shape[axis] += t.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<std::size_t> widths;
  for (const Tensor& t : parts) widths.push_back(t.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    }
    off += widths[k];
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts, [outer, row, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < widths[k]; ++i) p.grad[o * widths[k] + i] += self.grad[o * row + off + i];
        }
      }
      off += widths[k];
    }
  }, "concat");
}

/// Elements [begin, end) along axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  const std::size_t in_row = a.shape()[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * width);
  const auto& v = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * in_row + start), width,
                out.begin() + static_cast<std::ptrdiff_t>(o * width));
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [=](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < width; ++i) p.grad[o * in_row + start + i] += self.grad[o * width + i];
    }
  }, "slice");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the last two axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw ShapeError("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t p = a.shape()[a.rank() - 2], q = a.shape()[a.rank() - 1], r = b.shape()[b.rank() - 1];
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  detail::BroadcastPlan plan;
  if (batch_a.empty() && batch_b.empty()) {
    plan.out = {1};
    plan.stride_a = {0};
    plan.stride_b = {0};
  } else {
    try {
      plan = detail::plan_broadcast(batch_a.empty() ? Shape{1} : batch_a, batch_b.empty() ? Shape{1} : batch_b);
    } catch (const ShapeError&) {
      throw ShapeError("matmul batch mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
  }
  // plan strides count matrices, not elements.
  Shape out_shape = (batch_a.empty() && batch_b.empty()) ? Shape{} : plan.out;
  out_shape.push_back(p);
  out_shape.push_back(r);
  const std::size_t nb = shape_numel(plan.out);
  std::vector<std::size_t> ia_of(nb), ib_of(nb);
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    ia_of[o] = ia;
    ib_of[o] = ib;
  });
  const auto& va = a.values();
  const auto& vb = b.values();
  std::vector<double> out(nb * p * r, 0.0);
  for (std::size_t n = 0; n < nb; ++n) {
    const double* A = va.data() + ia_of[n] * p * q;
    const double* B = vb.data() + ib_of[n] * q * r;
    double* C = out.data() + n * p * r;
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t k = 0; k < q; ++k) {
        const double aik = A[i * q + k];
        const double* Bk = B + k * r;
        double* Ci = C + i * r;
        for (std::size_t j = 0; j < r; ++j) Ci[j] += aik * Bk[j];
      }
    }
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [=](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t n = 0; n < nb; ++n) {
      const double* G = self.grad.data() + n * p * r;
      const double* A = pa.value.data() + ia_of[n] * p * q;
      const double* B = pb.value.data() + ib_of[n] * q * r;
      if (pa.requires_grad) {
        double* GA = pa.grad.data() + ia_of[n] * p * q;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t k = 0; k < q; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < r; ++j) s += G[i * r + j] * B[k * r + j];
            GA[i * q + k] += s;
          }
        }
      }
      if (pb.requires_grad) {
        double* GB = pb.grad.data() + ib_of[n] * q * r;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t k = 0; k < q; ++k) {
            const double aik = A[i * q + k];
            for (std::size_t j = 0; j < r; ++j) GB[k * r + j] += aik * G[i * r + j];
          }
        }
      }
    }
  }, "matmul");
}

/// x[..., in] · W^T + b, with W [out, in] and b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt) {
  Tensor y = matmul(x, transpose_last2(weight));
  return bias ? add(y, *bias) : y;
}

// ---------------------------------------------------------------------------
// Attention primitives

/// Softmax over the last axis with max subtraction.
inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      double* gp = p.grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gp[j] += y[j] * (g[j] - dot);
    }
  }, "softmax");
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// 2-D cross-correlation. x is [c_in, H, W] or [N, c_in, H, W]; k is
/// [c_out, c_in, kh, kw] with odd kh, kw; optional bias [c_out].
inline Tensor conv2d(const Tensor& x, const Tensor& k, const std::optional<Tensor>& bias = std::nullopt,
                     Conv2dOptions opt = {}) {
  if (k.rank() != 4) throw ShapeError("conv2d kernel must be [c_out, c_in, kh, kw], got " + shape_str(k.shape()));
  const std::size_t co = k.dim(0), ci = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d kernel extents must be odd, got " + shape_str(k.shape()));
  if (opt.stride == 0) throw ConfigError("conv2d stride must be >= 1");
  const bool batched = x.rank() == 4;
  if (!(x.rank() == 3 || batched)) throw ShapeError("conv2d input must be rank 3 or 4, got " + shape_str(x.shape()));
  const std::size_t nb = batched ? x.dim(0) : 1;
  const std::size_t xc = x.dim(batched ? 1 : 0), H = x.dim(batched ? 2 : 1), W = x.dim(batched ? 3 : 2);
  if (xc != ci) throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " + shape_str(k.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != co)) throw ShapeError("conv2d bias must be [c_out]");
  const std::size_t s = opt.stride, pad = opt.padding;
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - kh) / s + 1, Wo = (W + 2 * pad - kw) / s + 1;

  // Valid output range along one axis for kernel tap d.
  auto range = [s, pad](std::size_t d, std::size_t in, std::size_t outn) {
    // need 0 <= o*s + d - pad < in
    std::ptrdiff_t lo = 0;
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(pad);
    const auto ss = static_cast<std::ptrdiff_t>(s);
    if (off < 0) lo = (-off + ss - 1) / ss;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - 1 - off);
    hi = hi < 0 ? -1 : hi / ss;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(outn) - 1);
    return std::pair<std::ptrdiff_t, std::ptrdiff_t>{lo, hi};
  };

  const auto& vx = x.values();
  const auto& vk = k.values();
  std::vector<double> out(nb * co * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < nb; ++n) {
    for (std::size_t o = 0; o < co; ++o) {
      double* Y = out.data() + (n * co + o) * Ho * Wo;
      if (bias) std::fill(Y, Y + Ho * Wo, bias->values()[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        const double* X = vx.data() + (n * ci + c) * H * W;
        const double* K = vk.data() + (o * ci + c) * kh * kw;
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const auto [y0, y1] = range(dy, H, Ho);
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const double w = K[dy * kw + dx];
            const auto [x0, x1] = range(dx, W, Wo);
            for (std::ptrdiff_t oy = y0; oy <= y1; ++oy) {
              // unsigned wrap-around keeps row + ox*s exact when dx < pad
              const std::size_t row = (static_cast<std::size_t>(oy) * s + dy - pad) * W + dx - pad;
              double* Yr = Y + static_cast<std::size_t>(oy) * Wo;
              if (s == 1) {
                for (std::ptrdiff_t ox = x0; ox <= x1; ++ox) Yr[ox] += w * X[row + static_cast<std::size_t>(ox)];
              } else {
                for (std::ptrdiff_t ox = x0; ox <= x1; ++ox) Yr[ox] += w * X[row + static_cast<std::size_t>(ox) * s];
              }
            }
          }
        }
      }
    }
  }
  Shape out_shape = batched ? Shape{nb, co, Ho, Wo} : Shape{co, Ho, Wo};
  std::vector<Tensor> inputs{x, k};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return detail::make_result(std::move(out_shape), std::move(out), inputs, [=](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    for (std::size_t n = 0; n < nb; ++n) {
      for (std::size_t o = 0; o < co; ++o) {
        const double* G = self.grad.data() + (n * co + o) * Ho * Wo;
        if (has_bias && self.parents[2]->requires_grad) {
          double gs = 0.0;
          for (std::size_t i = 0; i < Ho * Wo; ++i) gs += G[i];
          self.parents[2]->grad[o] += gs;
        }
        for (std::size_t c = 0; c < ci; ++c) {
          const double* X = px.value.data() + (n * ci + c) * H * W;
          const double* K = pk.value.data() + (o * ci + c) * kh * kw;
          double* GX = px.requires_grad ? px.grad.data() + (n * ci + c) * H * W : nullptr;
          double* GK = pk.requires_grad ? pk.grad.data() + (o * ci + c) * kh * kw : nullptr;
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const auto [y0, y1] = range(dy, H, Ho);
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const auto [x0, x1] = range(dx, W, Wo);
              const double w = K[dy * kw + dx];
              double gk = 0.0;
              for (std::ptrdiff_t oy = y0; oy <= y1; ++oy) {
                const std::size_t row = (static_cast<std::size_t>(oy) * s + dy - pad) * W + dx - pad;
                const double* Gr = G + static_cast<std::size_t>(oy) * Wo;
                for (std::ptrdiff_t ox = x0; ox <= x1; ++ox) {
                  const std::size_t xi = row + static_cast<std::size_t>(ox) * s;
                  gk += X[xi] * Gr[ox];
                  if (GX) GX[xi] += w * Gr[ox];
                }
              }
              if (GK) GK[dy * kw + dx] += gk;
            }
          }
        }
      }
    }
  }, "conv2d");
}

/// Nearest-neighbour 2x upsampling of [C, H, W].
inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest2x expects [C,H,W], got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<double> out(C * 4 * H * W);
  const auto& v = x.values();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) out[(c * 2 * H + y) * 2 * W + xx] = v[(c * H + y / 2) * W + xx / 2];
  return detail::make_result(Shape{C, 2 * H, 2 * W}, std::move(out), {x}, [C, H, W](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xx = 0; xx < 2 * W; ++xx)
          p.grad[(c * H + y / 2) * W + xx / 2] += self.grad[(c * 2 * H + y) * 2 * W + xx];
  }, "upsample");
}

/// Group normalisation of [C, H, W] with per-channel affine gamma, beta [C].
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.rank() != 3) throw ShapeError("group_norm expects [C,H,W], got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  if (groups == 0 || C % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm affine params must be [C]");
  const std::size_t cg = C / groups, n = cg * HW;
  const auto& v = x.values();
  std::vector<double> xhat(v.size()), inv_std(groups), out(v.size());
  for (std::size_t g = 0; g < groups; ++g) {
    const double* X = v.data() + g * n;
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += X[i];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (X[i] - m) * (X[i] - m);
    var /= static_cast<double>(n);
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) xhat[g * n + i] = (X[i] - m) * inv_std[g];
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = xhat[c * HW + i] * gamma[c] + beta[c];
  return detail::make_result(x.shape(), std::move(out), {x, gamma, beta},
                             [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& G = self.grad;
    for (std::size_t c = 0; c < C; ++c) {
      double gg = 0.0, gb = 0.0;
      for (std::size_t i = 0; i < HW; ++i) {
        gg += G[c * HW + i] * xhat[c * HW + i];
        gb += G[c * HW + i];
      }
      if (pg.requires_grad) pg.grad[c] += gg;
      if (pb.requires_grad) pb.grad[c] += gb;
    }
    if (!px.requires_grad) return;
    std::vector<double> dxhat(n);
    for (std::size_t g = 0; g < groups; ++g) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = g * n + i;
        dxhat[i] = G[idx] * pg.value[idx / HW];
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat[idx];
      }
      m1 /= static_cast<double>(n);
      m2 /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = g * n + i;
        px.grad[idx] += inv_std[g] * (dxhat[i] - m1 - xhat[idx] * m2);
      }
    }
  }, "group_norm");
}

}  // namespace amad

#pragma once

// Small segmentation-conditioned UNet denoiser with ten attention sites.
//
//   32x32: in_conv (3 -> c0)
//   16x16: down1 (stride 2, c0 -> c1) + label-map conditioning, res16, L0
//    8x8 : down2, then [res, attention] for L1..L9
//   16x16: upsample, concat skip, conv, res16b
//   32x32: upsample, concat skip, conv, out_conv (-> 3)
//
// The same weights serve both branches. The appearance branch records each
// site's keys and values; the structure branch concatenates them to its own.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "amad/adapter.hpp"
#include "amad/attention.hpp"
#include "amad/numeric/param_set.hpp"
#include "amad/scene/scene.hpp"
#include "amad/segcost.hpp"

namespace amad {

struct NetConfig {
  std::size_t num_classes = 6;
  std::size_t image = 32;
  std::size_t c0 = 16, c1 = 32;
  std::size_t heads = 2;
  std::size_t temb = 64;
  std::size_t groups = 8;

  static constexpr std::size_t kSites = 10;

  /// Spatial side of attention site L.
  std::size_t site_side(std::size_t layer) const { return layer == 0 ? image / 2 : image / 4; }
  AttnLayerCfg site_cfg(std::size_t layer, bool adapted) const {
    AttnLayerCfg c;
    c.layer = layer;
    c.d = c1;
    c.m = heads;
    c.h = c.w = site_side(layer);
    c.augmented = true;
    c.adapted = adapted && layer >= 1;
    return c;
  }
};

enum class AttnMode {
  Self,        // plain self-attention, no exemplar
  Augmented,   // exemplar keys/values concatenated, raw logits
  Adapter,     // Y->X logits refined by the adapter on L1..L9
  CatMask,     // Y->X logits hard-masked by the categorical cost on L1..L9
};

/// Keys and values of every site, token-major [n, d].
struct KVCapture {
  std::vector<Tensor> k, v;
};

/// Records logits at one site for visualisation.
struct AttnProbe {
  std::size_t layer = 1;
  std::optional<Tensor> a_yy, a_yx, refined;
};

/// Per-call branch wiring.
struct BranchRun {
  AttnMode mode = AttnMode::Self;
  const KVCapture* exemplar = nullptr;  // consumed by the structure branch
  KVCapture* capture = nullptr;         // filled by the appearance branch
  const CatCost* cost = nullptr;        // attention-resolution cost for L1..L9
  AttnProbe* probe = nullptr;
};

/// One-hot label planes [num_classes, H, W].
inline Tensor seg_onehot(const SegMap& seg) {
  seg.validate();
  const std::size_t n = seg.height * seg.width;
  std::vector<double> v(seg.num_classes * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[seg.labels[i] * n + i] = 1.0;
  return Tensor({seg.num_classes, seg.height, seg.width}, std::move(v));
}

/// Image in [0,1] -> latent in [-1,1], [3, H, W].
inline Tensor image_to_latent(const SceneImage& img) {
  const std::size_t n = img.height * img.width;
  std::vector<double> v(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * n + i] = img.rgb[i * 3 + c] * 2.0 - 1.0;
  return Tensor({3, img.height, img.width}, std::move(v));
}

inline SceneImage latent_to_image(const Tensor& z) {
  const std::size_t h = z.dim(1), w = z.dim(2), n = h * w;
  SceneImage img(h, w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.rgb[i * 3 + c] = std::clamp((z[c * n + i] + 1.0) * 0.5, 0.0, 1.0);
  return img;
}

class DenoiserNet {
 public:
  explicit DenoiserNet(NetConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) { init(seed); }

  const NetConfig& config() const { return cfg_; }
  ParamSet& params() { return ps_; }
  const ParamSet& params() const { return ps_; }

  bool has_adapter() const { return ps_.contains(adapter_prefix(1) + "s0.kl"); }

  /// Adds zero-initialised adapter weights.
  void attach_adapter(std::uint64_t seed, AdapterConfig acfg = {}) {
    if (has_adapter()) throw StateError("adapter already attached");
    acfg.heads = cfg_.heads;
    init_adapter(ps_, acfg, seed);
  }

  /// Loads `net.*` values from a stage-1 checkpoint.
  void load_net(const ParamSet& ckpt) {
    for (const auto& [path, e] : ps_.entries()) {
      if (path.rfind("net.", 0) == 0 && !ckpt.contains(path)) throw IoError("checkpoint lacks '" + path + "'");
    }
    ps_.load_values_from(ckpt);
  }

  /// Attaches (if needed) and loads `adapter.*` values.
  void load_adapter(const ParamSet& ckpt) {
    if (!ckpt.contains(adapter_prefix(1) + "s0.kl")) throw IoError("checkpoint holds no adapter weights");
    if (!has_adapter()) {
      AdapterConfig acfg;
      acfg.heads = cfg_.heads;
      acfg.c_mid = ckpt.at(adapter_prefix(1) + "s0.kl").dim(0);
      acfg.grouped = ckpt.at(adapter_prefix(1) + "s0.kl").dim(1) == 2 && cfg_.heads != 1;
      init_adapter(ps_, acfg, 0);
    }
    ps_.load_values_from(ckpt);
  }

  /// Predicted noise for latent z [3, H, W] at timestep t under label map seg.
  Tensor forward(const Tensor& z, long t, const Tensor& seg1h, const BranchRun& run = {}) const {
    const NetConfig& c = cfg_;
    if (z.rank() != 3 || z.dim(0) != 3 || z.dim(1) != c.image || z.dim(2) != c.image) {
      throw ShapeError("denoiser input must be [3," + std::to_string(c.image) + "," + std::to_string(c.image) +
                       "], got " + shape_str(z.shape()));
    }
    if (seg1h.rank() != 3 || seg1h.dim(0) != c.num_classes || seg1h.dim(1) != c.image || seg1h.dim(2) != c.image) {
      throw ShapeError("label planes must be [" + std::to_string(c.num_classes) + ",H,W], got " + shape_str(seg1h.shape()));
    }
    if ((run.mode != AttnMode::Self) && !run.exemplar) throw StateError("augmented attention needs exemplar keys/values");
    if ((run.mode == AttnMode::Adapter || run.mode == AttnMode::CatMask) && !run.cost) {
      throw StateError("cost-refined attention needs a categorical cost");
    }
    if (run.mode == AttnMode::Adapter && !has_adapter()) throw StateError("adapter requested but not loaded");
    if (run.capture) {
      run.capture->k.assign(NetConfig::kSites, Tensor());
      run.capture->v.assign(NetConfig::kSites, Tensor());
    }

    const Tensor temb = time_embedding(t);
    const Conv2dOptions same{1, 1}, down{2, 1};
    Tensor h32 = conv2d(z, p("net.in.w"), p("net.in.b"), same);
    Tensor cond = conv2d(silu(conv2d(seg1h, p("net.cond.w1"), p("net.cond.b1"), down)), p("net.cond.w2"), p("net.cond.b2"));
    Tensor h16 = add(conv2d(h32, p("net.down1.w"), p("net.down1.b"), down), cond);
    h16 = resblock("net.res16", h16, temb);
    h16 = attention_site(0, h16, run);
    Tensor h = conv2d(h16, p("net.down2.w"), p("net.down2.b"), down);
    for (std::size_t L = 1; L < NetConfig::kSites; ++L) {
      h = resblock("net.res8_" + std::to_string(L), h, temb);
      h = attention_site(L, h, run);
    }
    h = concat({upsample_nearest2x(h), h16}, 0);
    h = silu(group_norm(conv2d(h, p("net.up1.w"), p("net.up1.b"), same), c.groups, p("net.up1.g"), p("net.up1.beta")));
    h = resblock("net.res16b", h, temb);
    h = concat({upsample_nearest2x(h), h32}, 0);
    h = silu(group_norm(conv2d(h, p("net.up2.w"), p("net.up2.b"), same), c.groups, p("net.up2.g"), p("net.up2.beta")));
    return conv2d(h, p("net.out.w"), p("net.out.b"), same);
  }

  Tensor forward(const Tensor& z, long t, const SegMap& seg, const BranchRun& run = {}) const {
    return forward(z, t, seg_onehot(seg), run);
  }

  /// One attention site applied to features x [c1, s, s]; exposed for
  /// gradient tests.
  Tensor attention_site(std::size_t L, const Tensor& x, const BranchRun& run) const {
    const std::string pre = "net.attn" + std::to_string(L) + ".";
    const std::size_t C = x.dim(0), n = x.dim(1) * x.dim(2);
    const bool adapted = L >= 1 && (run.mode == AttnMode::Adapter || run.mode == AttnMode::CatMask);
    AttnLayerCfg acfg = cfg_.site_cfg(L, adapted);
    acfg.h = x.dim(1);
    acfg.w = x.dim(2);
    const Tensor tok = permute(reshape(group_norm(x, cfg_.groups, p(pre + "g"), p(pre + "beta")), {C, n}), {1, 0});
    const Tensor q = linear(tok, p(pre + "wq")), k = linear(tok, p(pre + "wk")), v = linear(tok, p(pre + "wv"));
    if (run.capture) {
      run.capture->k[L] = k.detach();
      run.capture->v[L] = v.detach();
    }
    Tensor o;
    if (run.mode == AttnMode::Self) {
      o = self_attention(q, k, v, acfg);
    } else {
      const AttnState st = make_attn_state(q, k, v, run.exemplar->k.at(L), run.exemplar->v.at(L), acfg);
      std::optional<Tensor> refined;
      if (adapted) {
        if (run.cost->rows() != n || run.cost->cols() != n) {
          throw ShapeError("categorical cost " + std::to_string(run.cost->rows()) + "x" + std::to_string(run.cost->cols()) +
                           " does not match attention site L" + std::to_string(L));
        }
        refined = run.mode == AttnMode::Adapter ? refine(st.a_yx, *run.cost, AdapterLayer::from(ps_, L, cfg_.heads))
                                                : refine_categorical_only(st.a_yx, *run.cost);
      }
      if (run.probe && run.probe->layer == L) {
        run.probe->a_yy = st.a_yy.detach();
        run.probe->a_yx = st.a_yx.detach();
        if (refined) run.probe->refined = refined->detach();
      }
      o = augmented_attention(st, refined);
    }
    const Tensor out = reshape(permute(linear(o, p(pre + "wo"), p(pre + "bo")), {1, 0}), {C, x.dim(1), x.dim(2)});
    return add(x, out);
  }

  Tensor time_embedding(long t) const {
    const std::size_t half = 16;
    std::vector<double> e(2 * half);
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      e[k] = std::sin(static_cast<double>(t) * f);
      e[half + k] = std::cos(static_cast<double>(t) * f);
    }
    const Tensor s({1, 2 * half}, std::move(e));
    return linear(silu(linear(s, p("net.temb.w1"), p("net.temb.b1"))), p("net.temb.w2"), p("net.temb.b2"));
  }

 private:
  const Tensor& p(const std::string& path) const { return ps_.at(path); }

  Tensor resblock(const std::string& pre, const Tensor& x, const Tensor& temb) const {
    const std::size_t co = p(pre + ".w2").dim(0);
    const Conv2dOptions same{1, 1};
    Tensor h = conv2d(silu(group_norm(x, cfg_.groups, p(pre + ".g1"), p(pre + ".beta1"))), p(pre + ".w1"), p(pre + ".b1"), same);
    h = add(h, reshape(linear(silu(temb), p(pre + ".wt"), p(pre + ".bt")), {co, 1, 1}));
    h = conv2d(silu(group_norm(h, cfg_.groups, p(pre + ".g2"), p(pre + ".beta2"))), p(pre + ".w2"), p(pre + ".b2"), same);
    return add(x, h);
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const NetConfig& c = cfg_;
    auto conv = [&](const std::string& name, std::size_t co, std::size_t ci, std::size_t k, bool zero = false) {
      const double sd = zero ? 0.0 : std::sqrt(1.0 / static_cast<double>(ci * k * k));
      ps_.add(name + ".w", zero ? Tensor({co, ci, k, k}) : Tensor::randn({co, ci, k, k}, rng, sd));
      ps_.add(name + ".b", Tensor({co}));
    };
    auto lin = [&](const std::string& w, std::size_t out, std::size_t in, bool zero = false) {
      ps_.add(w, zero ? Tensor({out, in}) : Tensor::randn({out, in}, rng, std::sqrt(1.0 / static_cast<double>(in))));
    };
    auto norm = [&](const std::string& g, const std::string& b, std::size_t ch) {
      ps_.add(g, Tensor({ch}, 1.0));
      ps_.add(b, Tensor({ch}));
    };
    auto res = [&](const std::string& pre, std::size_t ch) {
      norm(pre + ".g1", pre + ".beta1", ch);
      ps_.add(pre + ".w1", Tensor::randn({ch, ch, 3, 3}, rng, std::sqrt(1.0 / static_cast<double>(ch * 9))));
      ps_.add(pre + ".b1", Tensor({ch}));
      lin(pre + ".wt", ch, c.temb);
      ps_.add(pre + ".bt", Tensor({ch}));
      norm(pre + ".g2", pre + ".beta2", ch);
      ps_.add(pre + ".w2", Tensor({ch, ch, 3, 3}));
      ps_.add(pre + ".b2", Tensor({ch}));
    };
    auto attn = [&](std::size_t L) {
      const std::string pre = "net.attn" + std::to_string(L) + ".";
      norm(pre + "g", pre + "beta", c.c1);
      lin(pre + "wq", c.c1, c.c1);
      lin(pre + "wk", c.c1, c.c1);
      lin(pre + "wv", c.c1, c.c1);
      lin(pre + "wo", c.c1, c.c1, true);
      ps_.add(pre + "bo", Tensor({c.c1}));
    };
    lin("net.temb.w1", c.temb, 32);
    ps_.add("net.temb.b1", Tensor({c.temb}));
    lin("net.temb.w2", c.temb, c.temb);
    ps_.add("net.temb.b2", Tensor({c.temb}));
    conv("net.in", c.c0, 3, 3);
    ps_.add("net.cond.w1", Tensor::randn({c.c1, c.num_classes, 3, 3}, rng, std::sqrt(1.0 / static_cast<double>(c.num_classes * 9))));
    ps_.add("net.cond.b1", Tensor({c.c1}));
    ps_.add("net.cond.w2", Tensor::randn({c.c1, c.c1, 1, 1}, rng, std::sqrt(1.0 / static_cast<double>(c.c1))));
    ps_.add("net.cond.b2", Tensor({c.c1}));
    conv("net.down1", c.c1, c.c0, 3);
    res("net.res16", c.c1);
    attn(0);
    conv("net.down2", c.c1, c.c1, 3);
    for (std::size_t L = 1; L < NetConfig::kSites; ++L) {
      res("net.res8_" + std::to_string(L), c.c1);
      attn(L);
    }
    conv("net.up1", c.c1, 2 * c.c1, 3);
    norm("net.up1.g", "net.up1.beta", c.c1);
    res("net.res16b", c.c1);
    conv("net.up2", c.c0, c.c1 + c.c0, 3);
    norm("net.up2.g", "net.up2.beta", c.c0);
    conv("net.out", 3, c.c0, 3, true);
  }

  NetConfig cfg_;
  ParamSet ps_;
};

}  // namespace amad

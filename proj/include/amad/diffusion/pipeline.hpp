#pragma once

// Dual-branch sampling: the exemplar is inverted (or forward-noised) once and
// its per-step keys/values are replayed into the structure branch, which is
// denoised from seeded noise under the target label map.

#include <cstdlib>
#include <future>
#include <optional>
#include <random>
#include <thread>

#include "amad/diffusion/net.hpp"
#include "amad/diffusion/schedule.hpp"

namespace amad {

enum class ExemplarSource { Inversion, ForwardNoise };

/// Exemplar keys/values for every sampling step (ascending timesteps).
struct ExemplarTrace {
  std::vector<long> timesteps;
  std::vector<Tensor> latents;
  std::vector<KVCapture> kv;
};

inline EpsFn plain_eps_fn(const DenoiserNet& net, const SegMap& seg) {
  const Tensor s1h = seg_onehot(seg);
  return [&net, s1h](const Tensor& z, long t) { return net.forward(z, t, s1h); };
}

inline ExemplarTrace prepare_exemplar(const DenoiserNet& net, const SceneImage& img, const SegMap& seg,
                                      const NoiseSchedule& sched, ExemplarSource src = ExemplarSource::Inversion,
                                      std::uint64_t noise_seed = 0) {
  NoGradGuard ng;
  ExemplarTrace tr;
  tr.timesteps = sched.timesteps();
  const Tensor z0 = image_to_latent(img);
  const Tensor s1h = seg_onehot(seg);
  const auto capture = [&](const Tensor& z, long t) {
    KVCapture cap;
    BranchRun run;
    run.capture = &cap;
    Tensor eps = net.forward(z, t, s1h, run);
    tr.kv.push_back(std::move(cap));
    return eps;
  };
  if (src == ExemplarSource::Inversion) {
    // Each inversion step evaluates the net at (z_t, t), which is exactly the
    // appearance pass for step t, so keys/values are captured on the way up.
    Tensor z = z0;
    long prev = -1;
    for (long t : tr.timesteps) {
      const Tensor eps = prev < 0 ? net.forward(z, 0, s1h) : capture(z, prev);
      z = ddim_step(z, eps, prev, t, sched);
      tr.latents.push_back(z);
      prev = t;
    }
    capture(z, prev);
  } else {
    std::mt19937_64 rng(noise_seed);
    const Tensor noise = Tensor::randn(z0.shape(), rng);
    for (long t : tr.timesteps) {
      tr.latents.push_back(forward_noise(z0, t, noise, sched));
      capture(tr.latents.back(), t);
    }
  }
  return tr;
}

enum class CostMode { Baseline, CatMask, Adapter };

inline const char* cost_mode_name(CostMode m) {
  switch (m) {
    case CostMode::Baseline: return "baseline";
    case CostMode::CatMask: return "catmask";
    case CostMode::Adapter: return "adapter";
  }
  return "?";
}

/// eps(z) + (1 + s) (eps(z, O) - eps(z)). At weight 0 the first operand is
/// returned unchanged and at weight 1 the second, so both end points are
/// bitwise exact.
inline Tensor guided_eps(const Tensor& e_base, const Tensor& e_cost, double s) {
  const double w = 1.0 + s;
  if (w == 1.0) return e_cost;
  if (w == 0.0) return e_base;
  std::vector<double> out(e_base.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = e_base[i] + w * (e_cost[i] - e_base[i]);
  return Tensor(e_base.shape(), std::move(out));
}

/// Worker cap from AM_ADAPTER_THREADS (default 1).
inline std::size_t adapter_threads() {
  if (const char* v = std::getenv("AM_ADAPTER_THREADS")) {
    const long n = std::strtol(v, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

struct GenerateOptions {
  CostMode mode = CostMode::Adapter;
  double s = 7.5;
  std::uint64_t seed = 0;
  GuidanceSpec guide;
  std::size_t threads = 1;
  bool clip_x0 = true;
  /// Optional logit capture at one site on one sampling step (index into
  /// the descending loop, 0 = first step).
  AttnProbe* probe = nullptr;
  std::size_t probe_step = 0;
};

struct GenerateResult {
  SceneImage image;
  Tensor z0;
  std::vector<std::size_t> empty_rows;
  double max_abs_latent = 0.0;
};

inline CatCost attention_cost(const NetConfig& cfg, const SegMap& seg_y, const SegMap& seg_x, const GuidanceSpec& guide,
                              std::vector<std::size_t>* empty_rows = nullptr) {
  const std::size_t side = cfg.site_side(1);
  auto res = apply_guidance(downsample_cost(seg_y, seg_x, side, side), guide, seg_y, seg_x);
  if (empty_rows) *empty_rows = res.empty_rows;
  return std::move(res.cost);
}

inline GenerateResult generate(const DenoiserNet& net, const SegMap& seg_y, const SegMap& seg_x, const ExemplarTrace& ex,
                               const GenerateOptions& opt, const NoiseSchedule& sched) {
  if (opt.mode == CostMode::Adapter && !net.has_adapter()) throw StateError("adapter requested but not loaded");
  if (ex.timesteps != sched.timesteps()) throw StateError("exemplar trace does not match the sampling schedule");
  NoGradGuard ng;
  GenerateResult res;
  const CatCost cost = attention_cost(net.config(), seg_y, seg_x, opt.guide, &res.empty_rows);
  const Tensor s1h = seg_onehot(seg_y);
  std::mt19937_64 rng(opt.seed);
  Tensor z = Tensor::randn({3, net.config().image, net.config().image}, rng);
  const double w = 1.0 + opt.s;
  const bool need_base = opt.mode == CostMode::Baseline || w != 1.0;
  const bool need_cost = opt.mode != CostMode::Baseline && w != 0.0;
  const auto& ts = ex.timesteps;
  for (std::size_t i = ts.size(); i-- > 0;) {
    const std::size_t step = ts.size() - 1 - i;
    const long t = ts[i], t_prev = i == 0 ? -1 : ts[i - 1];
    BranchRun base;
    base.mode = AttnMode::Augmented;
    base.exemplar = &ex.kv[i];
    BranchRun refined = base;
    refined.mode = opt.mode == CostMode::Adapter ? AttnMode::Adapter : AttnMode::CatMask;
    refined.cost = &cost;
    if (opt.probe && step == opt.probe_step) (need_cost ? refined : base).probe = opt.probe;
    std::optional<Tensor> e_base, e_cost;
    if (need_base && need_cost && opt.threads > 1) {
      auto fut = std::async(std::launch::async, [&] {
        NoGradGuard inner;
        return net.forward(z, t, s1h, refined);
      });
      e_base = net.forward(z, t, s1h, base);
      e_cost = fut.get();
    } else {
      if (need_base) e_base = net.forward(z, t, s1h, base);
      if (need_cost) e_cost = net.forward(z, t, s1h, refined);
    }
    const Tensor eps = opt.mode == CostMode::Baseline ? *e_base
                       : !need_base                   ? *e_cost
                       : !need_cost                   ? *e_base
                                                      : guided_eps(*e_base, *e_cost, opt.s);
    z = ddim_step(z, eps, t, t_prev, sched, opt.clip_x0);
    for (double v : z.values()) res.max_abs_latent = std::max(res.max_abs_latent, std::abs(v));
  }
  res.z0 = z;
  res.image = latent_to_image(z);
  return res;
}

/// Convenience overload that inverts the exemplar first.
inline GenerateResult generate(const DenoiserNet& net, const SegMap& seg_y, const SceneImage& exemplar,
                               const SegMap& seg_x, const GenerateOptions& opt, const NoiseSchedule& sched) {
  return generate(net, seg_y, seg_x, prepare_exemplar(net, exemplar, seg_x, sched), opt, sched);
}

/// Structure branch alone with plain self-attention (no exemplar).
inline SceneImage sample_plain(const DenoiserNet& net, const SegMap& seg, std::uint64_t seed, const NoiseSchedule& sched,
                               bool clip_x0 = true) {
  NoGradGuard ng;
  std::mt19937_64 rng(seed);
  const Tensor z = Tensor::randn({3, net.config().image, net.config().image}, rng);
  return latent_to_image(ddim_sample(z, plain_eps_fn(net, seg), sched, clip_x0));
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
inline double psnr(const SceneImage& a, const SceneImage& b) {
  if (a.rgb.size() != b.rgb.size()) throw ShapeError("psnr: image sizes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) mse += (a.rgb[i] - b.rgb[i]) * (a.rgb[i] - b.rgb[i]);
  mse /= static_cast<double>(a.rgb.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

/// Inverts an image under its own label map and samples it back.
inline SceneImage reconstruct(const DenoiserNet& net, const SceneImage& img, const SegMap& seg, const NoiseSchedule& sched) {
  NoGradGuard ng;
  const EpsFn f = plain_eps_fn(net, seg);
  return latent_to_image(ddim_sample(ddim_invert(image_to_latent(img), f, sched), f, sched));
}

}  // namespace amad

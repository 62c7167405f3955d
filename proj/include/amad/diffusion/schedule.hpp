#pragma once

// Linear-beta noise schedule, forward noising and deterministic DDIM
// transitions in both directions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "amad/numeric/ops.hpp"

namespace amad {

struct NoiseSchedule {
  std::size_t T_train = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  std::size_t T_sample = 20;
  std::vector<double> betas, alphas_bar;

  static NoiseSchedule linear(std::size_t t_train = 1000, double b0 = 1e-4, double b1 = 0.02, std::size_t t_sample = 20) {
    if (t_train < 2 || t_sample == 0 || t_sample > t_train) throw ConfigError("invalid schedule step counts");
    if (!(b0 > 0.0 && b1 >= b0 && b1 < 1.0)) throw ConfigError("invalid beta endpoints");
    NoiseSchedule s;
    s.T_train = t_train;
    s.beta_start = b0;
    s.beta_end = b1;
    s.T_sample = t_sample;
    double prod = 1.0;
    for (std::size_t i = 0; i < t_train; ++i) {
      const double b = b0 + (b1 - b0) * static_cast<double>(i) / static_cast<double>(t_train - 1);
      s.betas.push_back(b);
      prod *= 1.0 - b;
      s.alphas_bar.push_back(prod);
    }
    return s;
  }

  /// t = -1 denotes the clean end of the chain with alpha_bar = 1.
  double alpha_bar(long t) const {
    if (t < -1 || t >= static_cast<long>(T_train)) {
      throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T_train) + ")");
    }
    return t < 0 ? 1.0 : alphas_bar[static_cast<std::size_t>(t)];
  }

  /// Evaluation timesteps in ascending order: 0, k, 2k, ... with k = T_train / T_sample.
  std::vector<long> timesteps() const {
    std::vector<long> ts;
    const std::size_t stride = T_train / T_sample;
    for (std::size_t i = 0; i < T_sample; ++i) ts.push_back(static_cast<long>(i * stride));
    return ts;
  }
};

/// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) noise
inline Tensor forward_noise(const Tensor& z0, long t, const Tensor& noise, const NoiseSchedule& s) {
  if (t < 0 || t >= static_cast<long>(s.T_train)) throw ConfigError("forward_noise: timestep " + std::to_string(t) + " out of range");
  const double ab = s.alpha_bar(t);
  return add(scale(z0, std::sqrt(ab)), scale(noise, std::sqrt(1.0 - ab)));
}

/// Deterministic DDIM transition from t to t_to through the implied clean
/// estimate. t_to < t samples; t_to > t inverts. With clip_x0 the clean
/// estimate is clamped to [-1, 1] and eps re-derived from it.
inline Tensor ddim_step(const Tensor& z_t, const Tensor& eps, long t, long t_to, const NoiseSchedule& s,
                        bool clip_x0 = false) {
  const double ab = s.alpha_bar(t), ab_to = s.alpha_bar(t_to);
  const auto& z = z_t.values();
  const auto& e = eps.values();
  if (z.size() != e.size()) throw ShapeError("ddim_step: latent and eps shapes differ");
  std::vector<double> out(z.size());
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab), ta = std::sqrt(ab_to), tb = std::sqrt(1.0 - ab_to);
  const bool clip = clip_x0 && sb > 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x0 = (z[i] - sb * e[i]) / sa;
    if (clip && std::abs(x0) > 1.0) {
      const double c = std::clamp(x0, -1.0, 1.0);
      out[i] = ta * c + tb * ((z[i] - sa * c) / sb);
    } else {
      out[i] = ta * x0 + tb * e[i];
    }
  }
  return Tensor(z_t.shape(), std::move(out));
}

using EpsFn = std::function<Tensor(const Tensor& z, long t)>;

/// Latents z_{tau_0} .. z_{tau_{N-1}} obtained by running the sampler
/// backwards from z0. Each step evaluates eps at the current latent with the
/// current latent's own timestep (0 for the clean start).
inline std::vector<Tensor> ddim_invert_trajectory(const Tensor& z0, const EpsFn& eps_fn, const NoiseSchedule& s) {
  std::vector<Tensor> traj;
  Tensor z = z0.clone();
  long prev = -1;
  for (long t : s.timesteps()) {
    z = ddim_step(z, eps_fn(z, std::max(prev, 0L)), prev, t, s);
    traj.push_back(z);
    prev = t;
  }
  return traj;
}

inline Tensor ddim_invert(const Tensor& z0, const EpsFn& eps_fn, const NoiseSchedule& s) {
  return ddim_invert_trajectory(z0, eps_fn, s).back();
}

/// Runs all sampling steps from the top timestep down to the clean end.
inline Tensor ddim_sample(const Tensor& z_top, const EpsFn& eps_fn, const NoiseSchedule& s, bool clip_x0 = false) {
  const auto ts = s.timesteps();
  Tensor z = z_top.clone();
  for (std::size_t i = ts.size(); i-- > 0;) {
    const long t_prev = i == 0 ? -1 : ts[i - 1];
    z = ddim_step(z, eps_fn(z, ts[i]), ts[i], t_prev, s, clip_x0);
  }
  return z;
}

}  // namespace amad

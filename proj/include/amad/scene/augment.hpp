#pragma once

// Exemplar-target pair creation: two independent crop + optional horizontal
// flip views of one anchor scene.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "amad/scene/scene.hpp"

namespace amad {

/// Geometric transform of one view: crop window in anchor pixels, resize to
/// the output size, then optional horizontal flip.
struct ViewTransform {
  std::size_t crop_y0 = 0, crop_x0 = 0;
  std::size_t crop_h = 0, crop_w = 0;
  bool flip = false;

  static ViewTransform identity(std::size_t h, std::size_t w) { return {0, 0, h, w, false}; }

  /// Anchor pixel that output pixel (y, x) samples under nearest-neighbour.
  std::pair<std::size_t, std::size_t> source_pixel(std::size_t y, std::size_t x, std::size_t out_h,
                                                   std::size_t out_w) const {
    const std::size_t xs = flip ? out_w - 1 - x : x;
    const std::size_t sy = crop_y0 + ((2 * y + 1) * crop_h) / (2 * out_h);
    const std::size_t sx = crop_x0 + ((2 * xs + 1) * crop_w) / (2 * out_w);
    return {sy, sx};
  }

  bool operator==(const ViewTransform&) const = default;
};

struct AugmentConfig {
  double min_crop_fraction = 0.75;
  double flip_probability = 0.5;
  std::size_t out_height = 32;
  std::size_t out_width = 32;
};

struct PairSample {
  SceneImage exemplar_image;
  SegMap exemplar_seg;
  SceneImage target_image;
  SegMap target_seg;
  std::string anchor_id;
  std::uint64_t seed = 0;
  ViewTransform exemplar_view;
  ViewTransform target_view;
};

/// Nearest-neighbour resample of labels through a view transform.
inline SegMap apply_view(const SegMap& seg, const ViewTransform& v, std::size_t out_h, std::size_t out_w) {
  SegMap out(out_h, out_w, seg.num_classes);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [sy, sx] = v.source_pixel(y, x, out_h, out_w);
      out.at(y, x) = seg.at(sy, sx);
    }
  }
  return out;
}

/// Bilinear resample of an image through a view transform (8-bit quantised).
inline SceneImage apply_view(const SceneImage& img, const ViewTransform& v, std::size_t out_h, std::size_t out_w) {
  SceneImage out(out_h, out_w);
  const double sy_scale = static_cast<double>(v.crop_h) / static_cast<double>(out_h);
  const double sx_scale = static_cast<double>(v.crop_w) / static_cast<double>(out_w);
  auto axis = [](double pos, std::size_t extent) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, extent - 1);
    return std::tuple<std::size_t, std::size_t, double>{lo, hi, pos - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, wy] = axis((y + 0.5) * sy_scale - 0.5, v.crop_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t xs = v.flip ? out_w - 1 - x : x;
      const auto [x0, x1, wx] = axis((xs + 0.5) * sx_scale - 0.5, v.crop_w);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return img.at(v.crop_y0 + yy, v.crop_x0 + xx, c); };
        const double top = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
        const double bot = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  quantize_8bit(out);
  return out;
}

inline ViewTransform random_view(std::size_t h, std::size_t w, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const auto min_h = static_cast<std::size_t>(std::ceil(cfg.min_crop_fraction * static_cast<double>(h)));
  const auto min_w = static_cast<std::size_t>(std::ceil(cfg.min_crop_fraction * static_cast<double>(w)));
  ViewTransform v;
  v.crop_h = std::uniform_int_distribution<std::size_t>(min_h, h)(rng);
  v.crop_w = std::uniform_int_distribution<std::size_t>(min_w, w)(rng);
  v.crop_y0 = std::uniform_int_distribution<std::size_t>(0, h - v.crop_h)(rng);
  v.crop_x0 = std::uniform_int_distribution<std::size_t>(0, w - v.crop_w)(rng);
  v.flip = std::bernoulli_distribution(cfg.flip_probability)(rng);
  return v;
}

/// Seed mixing so pairs are reproducible from (anchor id, seed) alone.
inline std::uint64_t pair_seed(const std::string& anchor_id, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (char c : anchor_id) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// Builds a pair from explicit view transforms.
inline PairSample make_pair_sample(const SceneImage& img, const SegMap& seg, const ViewTransform& exemplar,
                                   const ViewTransform& target, const AugmentConfig& cfg) {
  PairSample p;
  p.exemplar_view = exemplar;
  p.target_view = target;
  p.exemplar_image = apply_view(img, exemplar, cfg.out_height, cfg.out_width);
  p.exemplar_seg = apply_view(seg, exemplar, cfg.out_height, cfg.out_width);
  p.target_image = apply_view(img, target, cfg.out_height, cfg.out_width);
  p.target_seg = apply_view(seg, target, cfg.out_height, cfg.out_width);
  return p;
}

/// Two independent random views of the anchor; the same geometric transform
/// is applied to each view's image and label map.
inline PairSample augment_pair(const SceneImage& img, const SegMap& seg, const std::string& anchor_id,
                               std::uint64_t seed, const AugmentConfig& cfg = {}) {
  if (img.height != seg.height || img.width != seg.width) throw ShapeError("anchor image and segmap sizes differ");
  const double minf = cfg.min_crop_fraction;
  if (minf <= 0.0 || minf > 1.0) throw ConfigError("min_crop_fraction must be in (0, 1]");
  const double need_h = std::ceil(minf * static_cast<double>(cfg.out_height));
  const double need_w = std::ceil(minf * static_cast<double>(cfg.out_width));
  if (static_cast<double>(img.height) < need_h || static_cast<double>(img.width) < need_w) {
    throw ConfigError("anchor " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " is smaller than the minimum crop");
  }
  std::mt19937_64 rng(pair_seed(anchor_id, seed));
  const ViewTransform ve = random_view(img.height, img.width, cfg, rng);
  const ViewTransform vt = random_view(img.height, img.width, cfg, rng);
  PairSample p = make_pair_sample(img, seg, ve, vt, cfg);
  p.anchor_id = anchor_id;
  p.seed = seed;
  return p;
}

}  // namespace amad

#pragma once

// Synthetic multi-object scenes: label maps, RGB images, and the renderer
// that produces aligned pairs of both.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "amad/errors.hpp"

namespace amad {

/// 2-D grid of categorical labels in [0, num_classes).
struct SegMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> labels;  // row-major

  SegMap() = default;
  SegMap(std::size_t h, std::size_t w, std::size_t classes, std::uint8_t fill = 0)
      : height(h), width(w), num_classes(classes), labels(h * w, fill) {
    if (classes == 0 || classes > 256) throw ConfigError("num_classes must be in [1, 256]");
    if (fill >= classes) throw ConfigError("fill label out of range");
  }

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }

  /// Throws ConfigError if any label is out of range or storage is mis-sized.
  void validate() const {
    if (labels.size() != height * width) throw ConfigError("segmap storage does not match its extents");
    for (auto l : labels) {
      if (l >= num_classes) throw ConfigError("segmap label " + std::to_string(l) + " >= num_classes");
    }
  }

  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h(num_classes, 0);
    for (auto l : labels) ++h[l];
    return h;
  }

  bool operator==(const SegMap&) const = default;
};

/// RGB image with channel values in [0, 1], row-major interleaved.
struct SceneImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> rgb;

  SceneImage() = default;
  SceneImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), rgb(h * w * 3, fill) {}

  double at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }

  bool operator==(const SceneImage&) const = default;
};

/// Rounds every channel to the nearest multiple of 1/255 so images survive
/// an 8-bit PPM round trip bit-for-bit.
inline void quantize_8bit(SceneImage& img) {
  for (double& v : img.rgb) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

// ---------------------------------------------------------------------------
// Colour

struct Rgb {
  double r, g, b;
};

inline Rgb hsv_to_rgb(double hue_deg, double s, double v) {
  double h = std::fmod(hue_deg, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

/// Hue in degrees [0, 360); 0 for achromatic colours.
inline double rgb_hue(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  if (d <= 0.0) return 0.0;
  double h;
  if (mx == r) h = 60.0 * std::fmod((g - b) / d, 6.0);
  else if (mx == g) h = 60.0 * ((b - r) / d + 2.0);
  else h = 60.0 * ((r - g) / d + 4.0);
  return h < 0 ? h + 360.0 : h;
}

/// Canonical per-class colours. Classes are separated by hue so a class map
/// can be recovered from any rendered or generated image.
struct ClassPalette {
  std::vector<double> hue_deg;
  double saturation = 0.7;
  double value = 0.65;

  static ClassPalette standard(std::size_t num_classes) {
    ClassPalette p;
    const double step = 360.0 / static_cast<double>(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) p.hue_deg.push_back(std::fmod(210.0 + step * c, 360.0));
    return p;
  }

  std::size_t size() const { return hue_deg.size(); }
};

// ---------------------------------------------------------------------------
// Scene description

enum class ShapeKind : std::uint8_t { Rectangle, Disk, Triangle };

/// Per-instance colour: palette hue plus jitter, a base saturation/value, and
/// a sinusoidal brightness texture.
struct Appearance {
  double hue_offset_deg = 0.0;
  double saturation = 0.7;
  double value = 0.65;
  double tex_amplitude = 0.0;
  double tex_phase = 0.0;
  double tex_angle = 0.0;
  double tex_period = 8.0;
};

struct Instance {
  std::uint8_t class_id = 1;
  ShapeKind kind = ShapeKind::Disk;
  double cx = 0, cy = 0;          // centre, pixel units
  double half_w = 4, half_h = 4;  // disks use half_w as radius
  Appearance look;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    switch (kind) {
      case ShapeKind::Rectangle:
        return std::abs(dx) <= half_w && std::abs(dy) <= half_h;
      case ShapeKind::Disk:
        return dx * dx + dy * dy <= half_w * half_w;
      case ShapeKind::Triangle: {
        if (dy > half_h || dy < -half_h) return false;
        const double frac = (dy + half_h) / (2.0 * half_h);  // 0 at apex, 1 at base
        return std::abs(dx) <= half_w * frac;
      }
    }
    return false;
  }
};

struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 6;
  std::uint8_t background_class = 0;
  Appearance background;
  std::vector<Instance> instances;  // draw order: later instances on top
  ClassPalette palette = ClassPalette::standard(6);

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("scene canvas must be non-empty");
    if (palette.size() != num_classes) throw ConfigError("palette does not cover every class");
    if (background_class >= num_classes) throw ConfigError("background class out of range");
    for (const auto& inst : instances) {
      if (inst.class_id >= num_classes) throw ConfigError("instance class out of range");
    }
  }

  /// Class of the topmost instance covering the point, or the background.
  std::uint8_t label_at(double px, double py) const {
    for (auto it = instances.rbegin(); it != instances.rend(); ++it) {
      if (it->contains(px, py)) return it->class_id;
    }
    return background_class;
  }
};

inline Rgb shade(const ClassPalette& palette, std::uint8_t cls, const Appearance& a, double px, double py) {
  const double u = px * std::cos(a.tex_angle) + py * std::sin(a.tex_angle);
  const double tex = a.tex_amplitude * std::sin(2.0 * std::numbers::pi * u / a.tex_period + a.tex_phase);
  const double v = std::clamp(a.value + tex, 0.0, 1.0);
  return hsv_to_rgb(palette.hue_deg[cls] + a.hue_offset_deg, std::clamp(a.saturation, 0.0, 1.0), v);
}

/// Rasterises the scene at pixel centres, later instances overwriting
/// earlier ones. No anti-aliasing. Image channels are 8-bit quantised.
inline std::pair<SceneImage, SegMap> render_scene(const SceneSpec& spec) {
  spec.validate();
  SceneImage img(spec.height, spec.width);
  SegMap seg(spec.height, spec.width, spec.num_classes, spec.background_class);
  std::vector<int> owner(spec.height * spec.width, -1);
  for (std::size_t k = 0; k < spec.instances.size(); ++k) {
    const Instance& inst = spec.instances[k];
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        if (inst.contains(x + 0.5, y + 0.5)) {
          owner[y * spec.width + x] = static_cast<int>(k);
          seg.at(y, x) = inst.class_id;
        }
      }
    }
  }
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const int k = owner[y * spec.width + x];
      const Rgb c = k < 0 ? shade(spec.palette, spec.background_class, spec.background, x + 0.5, y + 0.5)
                          : shade(spec.palette, spec.instances[k].class_id, spec.instances[k].look, x + 0.5, y + 0.5);
      img.at(y, x, 0) = c.r;
      img.at(y, x, 1) = c.g;
      img.at(y, x, 2) = c.b;
    }
  }
  quantize_8bit(img);
  return {std::move(img), std::move(seg)};
}

// ---------------------------------------------------------------------------
// Random scene generation

struct SceneConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 6;
  std::size_t min_instances = 2;
  std::size_t max_instances = 5;
  double duplicate_class_prob = 0.45;  // chance a scene repeats one object class
  double min_half_extent = 4.0;
  double max_half_extent = 9.0;
  // Appearance jitter. Zero ranges give the canonical palette colour.
  double hue_jitter_deg = 8.0;
  double sat_min = 0.45, sat_max = 0.95;
  double val_min = 0.35, val_max = 0.95;
  double tex_amplitude = 0.1;

  static SceneConfig no_jitter() {
    SceneConfig c;
    c.hue_jitter_deg = 0.0;
    c.sat_min = c.sat_max = 0.7;
    c.val_min = c.val_max = 0.65;
    c.tex_amplitude = 0.0;
    return c;
  }
};

inline Appearance random_appearance(const SceneConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Appearance a;
  a.hue_offset_deg = (2.0 * u01(rng) - 1.0) * cfg.hue_jitter_deg;
  a.saturation = cfg.sat_min + (cfg.sat_max - cfg.sat_min) * u01(rng);
  a.value = cfg.val_min + (cfg.val_max - cfg.val_min) * u01(rng);
  a.tex_amplitude = cfg.tex_amplitude;
  a.tex_phase = 2.0 * std::numbers::pi * u01(rng);
  a.tex_angle = std::numbers::pi * u01(rng);
  a.tex_period = 6.0 + 6.0 * u01(rng);
  return a;
}

inline SceneSpec random_scene_spec(const SceneConfig& cfg, std::mt19937_64& rng) {
  if (cfg.num_classes < 2) throw ConfigError("need a background and at least one object class");
  if (cfg.min_instances < 2 || cfg.max_instances < cfg.min_instances) throw ConfigError("bad instance count range");
  SceneSpec spec;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.num_classes = cfg.num_classes;
  spec.palette = ClassPalette::standard(cfg.num_classes);
  spec.background_class = 0;
  spec.background = random_appearance(cfg, rng);

  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_instances, cfg.max_instances);
  std::uniform_int_distribution<int> class_dist(1, static_cast<int>(cfg.num_classes) - 1);
  std::uniform_int_distribution<int> kind_dist(0, 2);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t n = count_dist(rng);
  std::vector<std::uint8_t> classes;
  for (std::size_t i = 0; i < n; ++i) classes.push_back(static_cast<std::uint8_t>(class_dist(rng)));
  if (u01(rng) < cfg.duplicate_class_prob) classes[1] = classes[0];

  for (std::size_t i = 0; i < n; ++i) {
    Instance inst;
    inst.class_id = classes[i];
    inst.kind = static_cast<ShapeKind>(kind_dist(rng));
    inst.half_w = cfg.min_half_extent + (cfg.max_half_extent - cfg.min_half_extent) * u01(rng);
    inst.half_h = inst.kind == ShapeKind::Disk
                      ? inst.half_w
                      : cfg.min_half_extent + (cfg.max_half_extent - cfg.min_half_extent) * u01(rng);
    inst.cx = inst.half_w * 0.5 + (static_cast<double>(cfg.width) - inst.half_w) * u01(rng);
    inst.cy = inst.half_h * 0.5 + (static_cast<double>(cfg.height) - inst.half_h) * u01(rng);
    inst.look = random_appearance(cfg, rng);
    spec.instances.push_back(inst);
  }
  return spec;
}

}  // namespace amad

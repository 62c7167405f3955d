#pragma once

// Binary categorical matching cost between a target and an exemplar label
// map, its attention-resolution variant, and user-declared one-to-one
// guidance edits.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "amad/numeric/tensor.hpp"
#include "amad/scene/dataset.hpp"

namespace amad {

/// 4-D binary cost C(i,j,k,l) over target pixel (i,j) and exemplar pixel
/// (k,l), stored row-major as [h, w, h', w'].
struct CatCost {
  std::size_t h = 0, w = 0;    // target grid
  std::size_t hx = 0, wx = 0;  // exemplar grid
  std::vector<double> values;
  // Source label-map extents and the integer downsample factors used.
  std::size_t src_h = 0, src_w = 0, src_hx = 0, src_wx = 0;

  std::size_t rows() const { return h * w; }
  std::size_t cols() const { return hx * wx; }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return values[((i * w + j) * hx + k) * wx + l];
  }
  double factor_y() const { return static_cast<double>(src_h) / static_cast<double>(h); }
  double factor_x() const { return static_cast<double>(src_w) / static_cast<double>(w); }

  /// [1, h, w, h', w'] tensor, the categorical channel of the adapter input.
  Tensor as_tensor() const { return Tensor(Shape{1, h, w, hx, wx}, values); }

  bool operator==(const CatCost& o) const { return h == o.h && w == o.w && hx == o.hx && wx == o.wx && values == o.values; }
};

/// Applies the equality rule to every (target, exemplar) pixel pair.
inline CatCost build_cat_cost(const SegMap& seg_y, const SegMap& seg_x) {
  if (seg_y.num_classes != seg_x.num_classes) {
    throw ConfigError("segmaps disagree on num_classes (" + std::to_string(seg_y.num_classes) + " vs " +
                      std::to_string(seg_x.num_classes) + ")");
  }
  CatCost c;
  c.h = c.src_h = seg_y.height;
  c.w = c.src_w = seg_y.width;
  c.hx = c.src_hx = seg_x.height;
  c.wx = c.src_wx = seg_x.width;
  const std::size_t cols = c.cols();
  c.values.assign(c.rows() * cols, 0.0);
  for (std::size_t r = 0; r < c.rows(); ++r) {
    const auto ly = seg_y.labels[r];
    double* row = c.values.data() + r * cols;
    for (std::size_t q = 0; q < cols; ++q) row[q] = seg_x.labels[q] == ly ? 1.0 : 0.0;
  }
  return c;
}

/// Nearest-neighbour label downsampling; output pixel (y, x) takes the
/// source pixel containing its centre.
inline SegMap downsample_labels(const SegMap& seg, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || h > seg.height || w > seg.width) {
    throw ConfigError("cannot downsample " + std::to_string(seg.height) + "x" + std::to_string(seg.width) + " labels to " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  SegMap out(h, w, seg.num_classes);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = ((2 * y + 1) * seg.height) / (2 * h);
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = seg.at(sy, ((2 * x + 1) * seg.width) / (2 * w));
  }
  return out;
}

/// Downsamples both label maps to (h, w) and then builds the cost, so the
/// result stays exactly binary.
inline CatCost downsample_cost(const SegMap& seg_y, const SegMap& seg_x, std::size_t h, std::size_t w) {
  CatCost c = build_cat_cost(downsample_labels(seg_y, h, w), downsample_labels(seg_x, h, w));
  c.src_h = seg_y.height;
  c.src_w = seg_y.width;
  c.src_hx = seg_x.height;
  c.src_wx = seg_x.width;
  return c;
}

// ---------------------------------------------------------------------------
// Guidance

/// Binary region mask.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, bool fill = false) : height(h), width(w), bits(h * w, fill ? 1 : 0) {}

  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
  bool empty() const {
    for (auto b : bits) {
      if (b) return false;
    }
    return true;
  }

  static Mask of_class(const SegMap& seg, std::uint8_t cls) {
    Mask m(seg.height, seg.width);
    for (std::size_t i = 0; i < seg.labels.size(); ++i) m.bits[i] = seg.labels[i] == cls;
    return m;
  }

  Mask resample(std::size_t h, std::size_t w) const {
    Mask out(h, w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.set(y, x, at(((2 * y + 1) * height) / (2 * h), ((2 * x + 1) * width) / (2 * w)));
    return out;
  }
};

enum class GuidanceMode { Restrict };

struct GuidancePair {
  Mask target;    // region of S^Y
  Mask exemplar;  // region of S^X
  GuidanceMode mode = GuidanceMode::Restrict;
};

struct GuidanceSpec {
  std::vector<GuidancePair> pairs;

  bool empty() const { return pairs.empty(); }

  /// Masks must match their label maps and be non-empty.
  void validate(const SegMap& seg_y, const SegMap& seg_x) const {
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto& gp = pairs[p];
      if (gp.target.height != seg_y.height || gp.target.width != seg_y.width) {
        throw ConfigError("guidance pair " + std::to_string(p) + ": target mask does not match target segmap");
      }
      if (gp.exemplar.height != seg_x.height || gp.exemplar.width != seg_x.width) {
        throw ConfigError("guidance pair " + std::to_string(p) + ": exemplar mask does not match exemplar segmap");
      }
      if (gp.target.empty() || gp.exemplar.empty()) {
        throw ConfigError("guidance pair " + std::to_string(p) + " has an empty region");
      }
    }
  }
};

struct GuidanceResult {
  CatCost cost;
  /// Target rows (flattened i*w + j) left with no admissible exemplar column.
  std::vector<std::size_t> empty_rows;
};

/// Restricts each guided target region to its exemplar region, and reserves
/// the union of guided exemplar regions for guided targets only.
inline GuidanceResult apply_guidance(const CatCost& cost, const GuidanceSpec& guide, const SegMap& seg_y,
                                     const SegMap& seg_x) {
  guide.validate(seg_y, seg_x);
  GuidanceResult res{cost, {}};
  if (guide.empty()) return res;
  const std::size_t rows = cost.rows(), cols = cost.cols();
  std::vector<std::vector<std::uint8_t>> target_masks, exemplar_masks;
  std::vector<std::uint8_t> reserved(cols, 0), guided(rows, 0);
  for (const auto& gp : guide.pairs) {
    target_masks.push_back(gp.target.resample(cost.h, cost.w).bits);
    exemplar_masks.push_back(gp.exemplar.resample(cost.hx, cost.wx).bits);
    for (std::size_t q = 0; q < cols; ++q) reserved[q] |= exemplar_masks.back()[q];
    for (std::size_t r = 0; r < rows; ++r) guided[r] |= target_masks.back()[r];
  }
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = res.cost.values.data() + r * cols;
    if (!guided[r]) {
      for (std::size_t q = 0; q < cols; ++q) {
        if (reserved[q]) row[q] = 0.0;
      }
      continue;
    }
    for (std::size_t p = 0; p < target_masks.size(); ++p) {
      if (!target_masks[p][r]) continue;
      for (std::size_t q = 0; q < cols; ++q) {
        if (!exemplar_masks[p][q]) row[q] = 0.0;
      }
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = res.cost.values.data() + r * cols;
    if (std::all_of(row, row + cols, [](double v) { return v == 0.0; })) res.empty_rows.push_back(r);
  }
  return res;
}

/// Memoises guided, downsampled costs; the cost is time-independent so one
/// entry serves every sampling step.
class CatCostCache {
 public:
  const GuidanceResult& get(const SegMap& seg_y, const SegMap& seg_x, std::size_t h, std::size_t w,
                            const GuidanceSpec& guide = {}) {
    const std::uint64_t k = key(seg_y, seg_x, h, w, guide);
    std::lock_guard lock(mu_);
    auto it = entries_.find(k);
    if (it == entries_.end()) {
      it = entries_.emplace(k, apply_guidance(downsample_cost(seg_y, seg_x, h, w), guide, seg_y, seg_x)).first;
    } else {
      ++hits_;
    }
    return it->second;
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t hits() const { return hits_; }

 private:
  static void mix(std::uint64_t& hsh, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      hsh ^= (v >> (8 * b)) & 0xff;
      hsh *= 1099511628211ull;
    }
  }
  static void mix(std::uint64_t& hsh, std::size_t rows, std::size_t cols, const std::vector<std::uint8_t>& bytes) {
    mix(hsh, rows);
    mix(hsh, cols);
    for (auto b : bytes) {
      hsh ^= b;
      hsh *= 1099511628211ull;
    }
  }
  static std::uint64_t key(const SegMap& y, const SegMap& x, std::size_t h, std::size_t w, const GuidanceSpec& g) {
    std::uint64_t hsh = 1469598103934665603ull;
    mix(hsh, y.height, y.width, y.labels);
    mix(hsh, x.height, x.width, x.labels);
    mix(hsh, y.num_classes);
    mix(hsh, h);
    mix(hsh, w);
    for (const auto& p : g.pairs) {
      mix(hsh, p.target.height, p.target.width, p.target.bits);
      mix(hsh, p.exemplar.height, p.exemplar.width, p.exemplar.bits);
    }
    return hsh;
  }

  std::mutex mu_;
  std::map<std::uint64_t, GuidanceResult> entries_;
  std::size_t hits_ = 0;
};

// ---------------------------------------------------------------------------
// Guidance file: "AMGUIDE 1", then one line per pair with two PGM paths
// (target mask, exemplar mask), relative to the guidance file.

inline Mask read_mask(const std::filesystem::path& file) {
  const pnm::Raster r = pnm::read(file);
  if (r.channels != 1) throw IoError("'" + file.string() + "' is not a grayscale mask");
  Mask m(r.height, r.width);
  for (std::size_t i = 0; i < r.samples.size(); ++i) m.bits[i] = r.samples[i] != 0;
  return m;
}

inline void write_mask(const std::filesystem::path& file, const Mask& m) {
  pnm::Raster r;
  r.width = m.width;
  r.height = m.height;
  r.channels = 1;
  r.maxval = 1;
  r.samples = m.bits;
  pnm::write(file, r);
}

inline GuidanceSpec read_guidance(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot open '" + file.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != "AMGUIDE 1") throw IoError("'" + file.string() + "' lacks the AMGUIDE 1 header");
  GuidanceSpec spec;
  const auto base = file.parent_path();
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string t, x;
    if (!(ls >> t >> x)) throw IoError("'" + file.string() + "': malformed pair line '" + line + "'");
    GuidancePair gp;
    gp.target = read_mask(base / t);
    gp.exemplar = read_mask(base / x);
    spec.pairs.push_back(std::move(gp));
  }
  return spec;
}

/// Writes masks beside the guidance file as <stem>_<n>_{t,x}.pgm.
inline void write_guidance(const std::filesystem::path& file, const GuidanceSpec& spec) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write '" + file.string() + "'");
  os << "AMGUIDE 1\n";
  const auto stem = file.stem().string();
  for (std::size_t p = 0; p < spec.pairs.size(); ++p) {
    const std::string t = stem + "_" + std::to_string(p) + "_t.pgm";
    const std::string x = stem + "_" + std::to_string(p) + "_x.pgm";
    write_mask(file.parent_path() / t, spec.pairs[p].target);
    write_mask(file.parent_path() / x, spec.pairs[p].exemplar);
    os << t << ' ' << x << '\n';
  }
}

}  // namespace amad

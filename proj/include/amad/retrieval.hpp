#pragma once

// Exemplar retrieval: render a probe from the target label map with the
// structure branch alone, then rank a pool by grayscale SSIM.

#include <algorithm>
#include <filesystem>
#include <set>

#include "amad/diffusion/pipeline.hpp"
#include "amad/scene/dataset.hpp"

namespace amad {

struct GrayGrid {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  bool operator==(const GrayGrid&) const = default;
};

inline GrayGrid to_grayscale(const SceneImage& img) {
  GrayGrid g{img.height, img.width, std::vector<double>(img.height * img.width)};
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    g.values[i] = 0.299 * img.rgb[3 * i] + 0.587 * img.rgb[3 * i + 1] + 0.114 * img.rgb[3 * i + 2];
  }
  return g;
}

/// The form stored in the 8-bit cache files.
inline GrayGrid quantize_gray(GrayGrid g) {
  for (double& v : g.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return g;
}

inline void write_gray(const std::filesystem::path& file, const GrayGrid& g) {
  pnm::Raster r;
  r.width = g.width;
  r.height = g.height;
  r.channels = 1;
  r.maxval = 255;
  r.samples.resize(g.values.size());
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    r.samples[i] = static_cast<std::uint8_t>(std::lround(std::clamp(g.values[i], 0.0, 1.0) * 255.0));
  }
  pnm::write(file, r);
}

inline GrayGrid read_gray(const std::filesystem::path& file) {
  const pnm::Raster r = pnm::read(file);
  if (r.channels != 1) throw IoError("'" + file.string() + "' is not a grayscale image");
  GrayGrid g{r.height, r.width, std::vector<double>(r.samples.size())};
  for (std::size_t i = 0; i < r.samples.size(); ++i) g.values[i] = r.samples[i] / static_cast<double>(r.maxval);
  return g;
}

/// Mean SSIM over all fully contained 7x7 windows (uniform weights,
/// population moments, C1 = 0.01^2, C2 = 0.03^2 for unit dynamic range).
inline double structural_similarity(const GrayGrid& a, const GrayGrid& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("structural_similarity: grid sizes differ");
  constexpr std::size_t kWin = 7;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const std::size_t H = a.height, W = a.width;
  const std::size_t win_h = std::min(kWin, H), win_w = std::min(kWin, W);
  const double n = static_cast<double>(win_h * win_w);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + win_h <= H; ++y) {
    for (std::size_t x = 0; x + win_w <= W; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t dy = 0; dy < win_h; ++dy) {
        for (std::size_t dx = 0; dx < win_w; ++dx) {
          const double va = a.at(y + dy, x + dx), vb = b.at(y + dy, x + dx);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
      total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Negative mean squared difference; higher is more similar.
inline double neg_l2(const GrayGrid& a, const GrayGrid& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("neg_l2: grid sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return -s / static_cast<double>(a.values.size());
}

enum class SimilarityMetric { Ssim, L2 };

struct PoolEntry {
  std::string id;
  SceneImage image;
  SegMap seg;
  GrayGrid gray;  // quantize_gray(to_grayscale(image))
};

class ExemplarPool {
 public:
  ExemplarPool() = default;

  static ExemplarPool from_samples(const std::vector<DatasetSample>& samples) {
    ExemplarPool p;
    for (const auto& s : samples) p.add(s.id, s.image, s.seg);
    return p;
  }

  /// Loads a scene-data directory. Grayscale cache files (<id>.gray.pgm)
  /// are created when missing and rebuilt when they disagree with the image.
  static ExemplarPool load(const std::filesystem::path& dir) {
    ExemplarPool p;
    p.index_ = dir / kManifestName;
    for (const auto& s : read_dataset(dir)) {
      const GrayGrid fresh = quantize_gray(to_grayscale(s.image));
      const auto cache = gray_cache_path(dir, s.id);
      bool ok = false;
      if (std::filesystem::exists(cache)) {
        try {
          ok = read_gray(cache) == fresh;
        } catch (const IoError&) {
          ok = false;
        }
      }
      if (!ok) write_gray(cache, fresh);
      p.add(s.id, s.image, s.seg, fresh);
    }
    return p;
  }

  static std::filesystem::path gray_cache_path(const std::filesystem::path& dir, const std::string& id) {
    return dir / (id + ".gray.pgm");
  }

  void add(const std::string& id, const SceneImage& img, const SegMap& seg) {
    add(id, img, seg, quantize_gray(to_grayscale(img)));
  }

  const std::vector<PoolEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::filesystem::path& index_path() const { return index_; }

  const PoolEntry& find(const std::string& id) const {
    for (const auto& e : entries_)
      if (e.id == id) return e;
    throw ConfigError("no pool entry '" + id + "'");
  }

 private:
  void add(const std::string& id, const SceneImage& img, const SegMap& seg, GrayGrid gray) {
    if (!ids_.insert(id).second) throw ConfigError("duplicate pool id '" + id + "'");
    entries_.push_back({id, img, seg, std::move(gray)});
  }

  std::vector<PoolEntry> entries_;
  std::set<std::string> ids_;
  std::filesystem::path index_;
};

struct RetrievalHit {
  std::string id;
  double score = 0.0;
  std::size_t index = 0;
};

/// Ranks the pool against a probe; score descending, ties by ascending id.
inline std::vector<RetrievalHit> rank_pool(const GrayGrid& probe, const ExemplarPool& pool, std::size_t k = 1,
                                           SimilarityMetric metric = SimilarityMetric::Ssim) {
  if (pool.empty()) throw ConfigError("exemplar pool is empty");
  std::vector<RetrievalHit> hits;
  hits.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& e = pool.entries()[i];
    const double s = metric == SimilarityMetric::Ssim ? structural_similarity(probe, e.gray) : neg_l2(probe, e.gray);
    hits.push_back({e.id, s, i});
  }
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  hits.resize(std::min(k, hits.size()));
  return hits;
}

struct RetrievalResult {
  SceneImage probe;
  std::vector<RetrievalHit> hits;
};

inline RetrievalResult retrieve(const SegMap& seg_y, const ExemplarPool& pool, const DenoiserNet& net, std::uint64_t seed,
                                std::size_t k = 1, SimilarityMetric metric = SimilarityMetric::Ssim,
                                const NoiseSchedule& sched = NoiseSchedule::linear()) {
  if (pool.empty()) throw ConfigError("exemplar pool is empty");
  RetrievalResult r;
  r.probe = sample_plain(net, seg_y, seed, sched);
  r.hits = rank_pool(quantize_gray(to_grayscale(r.probe)), pool, k, metric);
  return r;
}

}  // namespace amad

#pragma once

// Proxy metrics on synthetic scenes and attention / cost heatmaps.
//
// structure_iou: mean IoU between the target labels and the class map
//   recovered from the generated image by nearest palette hue.
// appearance_dist: mean over classes present in both label maps of the
//   per-channel L1 distance between 16-bin colour histograms of the
//   generated and exemplar pixels of that class (averaged over channels).

#include <filesystem>
#include <fstream>
#include <optional>

#include "amad/image/pnm.hpp"
#include "amad/scene/dataset.hpp"
#include "amad/segcost.hpp"

namespace amad {

inline double hue_distance(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

inline SegMap recover_classmap(const SceneImage& img, const ClassPalette& palette) {
  if (palette.size() == 0) throw ConfigError("empty palette");
  SegMap out(img.height, img.width, palette.size());
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const double h = rgb_hue(img.rgb[3 * i], img.rgb[3 * i + 1], img.rgb[3 * i + 2]);
    std::size_t best = 0;
    double best_d = hue_distance(h, palette.hue_deg[0]);
    for (std::size_t c = 1; c < palette.size(); ++c) {
      const double d = hue_distance(h, palette.hue_deg[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

struct ClassMetric {
  std::size_t cls = 0;
  std::optional<double> iou;         // absent if the class is in neither map
  std::optional<double> appearance;  // absent unless the class is in both segs
};

struct MetricReport {
  double structure_iou = 0.0;
  std::optional<double> appearance_dist;
  std::vector<std::size_t> shared_classes;
  std::vector<ClassMetric> per_class;
};

constexpr std::size_t kHistBins = 16;

/// Normalised per-channel histograms of the pixels where seg == cls.
inline std::array<std::array<double, kHistBins>, 3> class_histogram(const SceneImage& img, const SegMap& seg, std::size_t cls) {
  std::array<std::array<double, kHistBins>, 3> h{};
  std::size_t n = 0;
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    if (seg.labels[i] != cls) continue;
    ++n;
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(img.rgb[3 * i + c], 0.0, 1.0);
      h[c][std::min<std::size_t>(kHistBins - 1, static_cast<std::size_t>(v * kHistBins))] += 1.0;
    }
  }
  if (n)
    for (auto& ch : h)
      for (double& b : ch) b /= static_cast<double>(n);
  return h;
}

inline MetricReport score(const SceneImage& generated, const SegMap& seg_y, const SceneImage& exemplar, const SegMap& seg_x,
                          const ClassPalette& palette) {
  if (generated.height != seg_y.height || generated.width != seg_y.width || exemplar.height != seg_x.height ||
      exemplar.width != seg_x.width) {
    throw ShapeError("score: image and label map sizes differ");
  }
  if (seg_y.num_classes > palette.size()) throw ConfigError("palette does not cover every class");
  const SegMap rec = recover_classmap(generated, palette);
  const auto hy = seg_y.histogram(), hx = seg_x.histogram();
  MetricReport r;
  double iou_sum = 0.0, app_sum = 0.0;
  std::size_t iou_n = 0;
  for (std::size_t c = 0; c < seg_y.num_classes; ++c) {
    ClassMetric m;
    m.cls = c;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < rec.labels.size(); ++i) {
      const bool a = seg_y.labels[i] == c, b = rec.labels[i] == c;
      inter += a && b;
      uni += a || b;
    }
    if (uni) {
      m.iou = static_cast<double>(inter) / static_cast<double>(uni);
      iou_sum += *m.iou;
      ++iou_n;
    }
    if (hy[c] && c < hx.size() && hx[c]) {
      const auto ga = class_histogram(generated, seg_y, c), gb = class_histogram(exemplar, seg_x, c);
      double d = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t b = 0; b < kHistBins; ++b) d += std::abs(ga[ch][b] - gb[ch][b]);
      m.appearance = d / 3.0;
      app_sum += *m.appearance;
      r.shared_classes.push_back(c);
    }
    r.per_class.push_back(m);
  }
  r.structure_iou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  if (!r.shared_classes.empty()) r.appearance_dist = app_sum / static_cast<double>(r.shared_classes.size());
  return r;
}

inline MetricReport score(const SceneImage& generated, const SegMap& seg_y, const SceneImage& exemplar, const SegMap& seg_x) {
  return score(generated, seg_y, exemplar, seg_x, ClassPalette::standard(seg_y.num_classes));
}

struct ReportRow {
  std::string sample;
  std::string config;
  MetricReport report;
};

/// Per-sample rows, then one aggregate row per config (sample = "mean").
/// Absent appearance values are written as empty fields.
inline void write_report_csv(const std::filesystem::path& file, const std::vector<ReportRow>& rows) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write '" + file.string() + "'");
  os << "sample,config,structure_iou,appearance_dist,shared_classes\n";
  std::vector<std::string> configs;
  for (const auto& r : rows) {
    if (std::find(configs.begin(), configs.end(), r.config) == configs.end()) configs.push_back(r.config);
    os << r.sample << ',' << r.config << ',' << r.report.structure_iou << ',';
    if (r.report.appearance_dist) os << *r.report.appearance_dist;
    os << ',';
    for (std::size_t i = 0; i < r.report.shared_classes.size(); ++i) os << (i ? ";" : "") << r.report.shared_classes[i];
    os << '\n';
  }
  for (const auto& c : configs) {
    double iou = 0.0, app = 0.0;
    std::size_t n = 0, na = 0;
    for (const auto& r : rows) {
      if (r.config != c) continue;
      iou += r.report.structure_iou;
      ++n;
      if (r.report.appearance_dist) {
        app += *r.report.appearance_dist;
        ++na;
      }
    }
    os << "mean," << c << ',' << iou / static_cast<double>(n) << ',';
    if (na) os << app / static_cast<double>(na);
    os << ",\n";
  }
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Black -> red -> yellow -> white for v in [0, 1].
inline std::array<std::uint8_t, 3> heat_ramp(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {ch(3.0 * v), ch(3.0 * v - 1.0), ch(3.0 * v - 2.0)};
}

/// Head-averaged softmax of the Y->X logits [m, h*w, hx*wx] for one
/// target query pixel. Sums to 1.
inline std::vector<double> attention_row(const Tensor& logits, std::size_t h, std::size_t w, std::size_t qy, std::size_t qx) {
  if (logits.rank() != 3 || logits.dim(1) != h * w) throw ShapeError("attention_row: logits do not match the query grid");
  if (qy >= h || qx >= w) {
    throw ConfigError("query point (" + std::to_string(qy) + "," + std::to_string(qx) + ") outside " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  const std::size_t m = logits.dim(0), n = logits.dim(1), nk = logits.dim(2), q = qy * w + qx;
  std::vector<double> row(nk, 0.0);
  for (std::size_t head = 0; head < m; ++head) {
    const double* l = &logits.values()[(head * n + q) * nk];
    const double mx = *std::max_element(l, l + nk);
    double z = 0.0;
    for (std::size_t j = 0; j < nk; ++j) z += std::exp(l[j] - mx);
    for (std::size_t j = 0; j < nk; ++j) row[j] += std::exp(l[j] - mx) / z / static_cast<double>(m);
  }
  return row;
}

/// Writes a grid of values in [0,1] (already normalised) as a PPM,
/// upsampled by nearest neighbour to out_h x out_w.
inline pnm::Raster heat_raster(const std::vector<double>& v, std::size_t gh, std::size_t gw, std::size_t out_h, std::size_t out_w) {
  pnm::Raster r;
  r.width = out_w;
  r.height = out_h;
  r.channels = 3;
  r.samples.resize(out_h * out_w * 3);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto c = heat_ramp(v[(y * gh / out_h) * gw + x * gw / out_w]);
      for (std::size_t k = 0; k < 3; ++k) r.samples[(y * out_w + x) * 3 + k] = c[k];
    }
  }
  return r;
}

/// Heatmap of the query's Y->X attention over an exemplar grid hx x wx,
/// scaled so the peak maps to white.
inline std::vector<double> render_attention(const Tensor& logits, std::size_t h, std::size_t w, std::size_t hx, std::size_t wx,
                                            std::size_t qy, std::size_t qx, const std::filesystem::path& out,
                                            std::size_t out_h, std::size_t out_w) {
  if (logits.rank() == 3 && logits.dim(2) != hx * wx) throw ShapeError("render_attention: logits do not match the exemplar grid");
  const std::vector<double> row = attention_row(logits, h, w, qy, qx);
  const double peak = *std::max_element(row.begin(), row.end());
  std::vector<double> norm(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) norm[i] = row[i] / peak;
  pnm::write(out, heat_raster(norm, hx, wx, out_h, out_w));
  return row;
}

/// Binary heatmap of C(qy, qx, ., .); white where the labels agree.
inline void render_cat_cost(const CatCost& c, std::size_t qy, std::size_t qx, const std::filesystem::path& out,
                            std::size_t out_h = 0, std::size_t out_w = 0) {
  if (qy >= c.h || qx >= c.w) throw ConfigError("query point outside the cost grid");
  std::vector<double> v(c.hx * c.wx);
  for (std::size_t k = 0; k < c.hx; ++k)
    for (std::size_t l = 0; l < c.wx; ++l) v[k * c.wx + l] = c.at(qy, qx, k, l);
  pnm::write(out, heat_raster(v, c.hx, c.wx, out_h ? out_h : c.hx, out_w ? out_w : c.wx));
}

/// Fraction of a normalised attention row inside a mask on the same grid.
inline double mass_inside(const std::vector<double>& row, const Mask& m) {
  if (row.size() != m.height * m.width) throw ShapeError("mass_inside: row and mask sizes differ");
  double in = 0.0, total = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    total += row[i];
    if (m.bits[i]) in += row[i];
  }
  return in / total;
}

}  // namespace amad

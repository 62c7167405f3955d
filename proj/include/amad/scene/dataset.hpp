#pragma once

// On-disk scene datasets: one PPM + PGM per sample and a tab-separated
// manifest `<id>\t<image-file>\t<seg-file>\t<seed>`.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "amad/image/pnm.hpp"
#include "amad/scene/scene.hpp"

namespace amad {

struct DatasetSample {
  std::string id;
  SceneImage image;
  SegMap seg;
  std::uint64_t seed = 0;
};

inline pnm::Raster to_raster(const SceneImage& img) {
  pnm::Raster r;
  r.width = img.width;
  r.height = img.height;
  r.channels = 3;
  r.maxval = 255;
  r.samples.resize(img.rgb.size());
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    r.samples[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.rgb[i], 0.0, 1.0) * 255.0));
  }
  return r;
}

inline pnm::Raster to_raster(const SegMap& seg) {
  seg.validate();
  pnm::Raster r;
  r.width = seg.width;
  r.height = seg.height;
  r.channels = 1;
  r.maxval = static_cast<unsigned>(std::max<std::size_t>(seg.num_classes, 2) - 1);
  r.samples = seg.labels;
  return r;
}

inline SceneImage image_from_raster(const pnm::Raster& r, const std::filesystem::path& file) {
  if (r.channels != 3) throw IoError("'" + file.string() + "' is not an RGB image");
  SceneImage img(r.height, r.width);
  for (std::size_t i = 0; i < r.samples.size(); ++i) img.rgb[i] = r.samples[i] / static_cast<double>(r.maxval);
  return img;
}

/// num_classes is maxval + 1 unless given explicitly.
inline SegMap segmap_from_raster(const pnm::Raster& r, const std::filesystem::path& file,
                                 std::size_t num_classes = 0) {
  if (r.channels != 1) throw IoError("'" + file.string() + "' is not a label map");
  SegMap seg(r.height, r.width, num_classes ? num_classes : r.maxval + 1);
  seg.labels = r.samples;
  try {
    seg.validate();
  } catch (const ConfigError& e) {
    throw IoError("'" + file.string() + "': " + e.what());
  }
  return seg;
}

inline SceneImage read_image(const std::filesystem::path& file) { return image_from_raster(pnm::read(file), file); }
inline void write_image(const std::filesystem::path& file, const SceneImage& img) { pnm::write(file, to_raster(img)); }
inline SegMap read_segmap(const std::filesystem::path& file, std::size_t num_classes = 0) {
  return segmap_from_raster(pnm::read(file), file, num_classes);
}
inline void write_segmap(const std::filesystem::path& file, const SegMap& seg) { pnm::write(file, to_raster(seg)); }

inline constexpr const char* kManifestName = "manifest.tsv";

inline void write_manifest(const std::filesystem::path& dir, const std::vector<DatasetSample>& samples) {
  std::vector<const DatasetSample*> sorted;
  for (const auto& s : samples) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::ofstream os(dir / kManifestName);
  if (!os) throw IoError("cannot write '" + (dir / kManifestName).string() + "'");
  for (const auto* s : sorted) os << s->id << '\t' << s->id << ".ppm\t" << s->id << ".pgm\t" << s->seed << '\n';
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetSample>& samples) {
  std::filesystem::create_directories(dir);
  for (const auto& s : samples) {
    if (s.id.empty() || s.id.find_first_of("\t\n/") != std::string::npos) {
      throw ConfigError("invalid sample id '" + s.id + "'");
    }
    write_image(dir / (s.id + ".ppm"), s.image);
    write_segmap(dir / (s.id + ".pgm"), s.seg);
  }
  write_manifest(dir, samples);
}

struct ManifestRow {
  std::string id, image_file, seg_file;
  std::uint64_t seed = 0;
};

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir) {
  std::vector<ManifestRow> rows;
  const auto path = dir / kManifestName;
  if (!std::filesystem::exists(path)) return rows;
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRow r;
    std::string seed;
    if (!std::getline(ls, r.id, '\t') || !std::getline(ls, r.image_file, '\t') || !std::getline(ls, r.seg_file, '\t') ||
        !std::getline(ls, seed)) {
      throw IoError("'" + path.string() + "' line " + std::to_string(lineno) + " is malformed");
    }
    try {
      r.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw IoError("'" + path.string() + "' line " + std::to_string(lineno) + " has a bad seed");
    }
    rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return rows;
}

/// Reads every sample listed in the manifest, ordered by id. A directory
/// without a manifest is an empty dataset.
inline std::vector<DatasetSample> read_dataset(const std::filesystem::path& dir) {
  std::vector<DatasetSample> out;
  for (const auto& row : read_manifest(dir)) {
    DatasetSample s;
    s.id = row.id;
    s.seed = row.seed;
    s.image = read_image(dir / row.image_file);
    s.seg = read_segmap(dir / row.seg_file);
    if (s.image.height != s.seg.height || s.image.width != s.seg.width) {
      throw IoError("'" + (dir / row.seg_file).string() + "' does not match its image size");
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string sample_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

/// Renders `count` random scenes; scene i uses seed (seed * 1000003 + i).
inline std::vector<DatasetSample> generate_scenes(std::size_t count, std::uint64_t seed, const SceneConfig& cfg = {}) {
  std::vector<DatasetSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    DatasetSample s;
    s.id = sample_id(i);
    s.seed = seed * 1000003ull + i;
    std::mt19937_64 rng(s.seed);
    auto [img, seg] = render_scene(random_scene_spec(cfg, rng));
    s.image = std::move(img);
    s.seg = std::move(seg);
    out.push_back(std::move(s));
  }
  return out;
}

/// Re-derives the scene description of a generated sample from its seed.
inline SceneSpec regenerate_spec(std::uint64_t sample_seed, const SceneConfig& cfg = {}) {
  std::mt19937_64 rng(sample_seed);
  return random_scene_spec(cfg, rng);
}

}  // namespace amad

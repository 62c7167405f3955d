#pragma once

// Binary PPM (P6) and PGM (P5) codec, 8-bit samples only.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "amad/errors.hpp"

namespace amad::pnm {

struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 3 for P6, 1 for P5
  unsigned maxval = 255;
  std::vector<std::uint8_t> samples;  // row-major, interleaved
};

namespace detail {

inline void skip_ws_and_comments(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c != EOF && std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline bool read_uint(std::istream& is, unsigned long& v) {
  skip_ws_and_comments(is);
  if (!std::isdigit(is.peek())) return false;
  v = 0;
  while (std::isdigit(is.peek())) {
    v = v * 10 + static_cast<unsigned long>(is.get() - '0');
    if (v > 1u << 24) return false;
  }
  return true;
}

}  // namespace detail

inline Raster read(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open '" + file.string() + "'");
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw IoError("'" + file.string() + "' is not a binary PGM/PPM file");
  }
  Raster r;
  r.channels = magic[1] == '6' ? 3 : 1;
  unsigned long w = 0, h = 0, maxval = 0;
  if (!detail::read_uint(is, w) || !detail::read_uint(is, h) || !detail::read_uint(is, maxval) || w == 0 || h == 0 ||
      maxval == 0 || maxval > 255) {
    throw IoError("bad header in '" + file.string() + "'");
  }
  if (!std::isspace(is.get())) throw IoError("bad header in '" + file.string() + "'");
  r.width = w;
  r.height = h;
  r.maxval = static_cast<unsigned>(maxval);
  r.samples.resize(r.width * r.height * r.channels);
  if (!is.read(reinterpret_cast<char*>(r.samples.data()), static_cast<std::streamsize>(r.samples.size()))) {
    throw IoError("truncated pixel data in '" + file.string() + "'");
  }
  for (std::uint8_t s : r.samples) {
    if (s > r.maxval) throw IoError("sample exceeds maxval in '" + file.string() + "'");
  }
  return r;
}

inline void write(const std::filesystem::path& file, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw IoError("unsupported channel count for '" + file.string() + "'");
  if (r.samples.size() != r.width * r.height * r.channels) {
    throw IoError("raster size mismatch writing '" + file.string() + "'");
  }
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot open '" + file.string() + "' for writing");
  os << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << '\n' << r.maxval << '\n';
  os.write(reinterpret_cast<const char*>(r.samples.data()), static_cast<std::streamsize>(r.samples.size()));
  if (!os) throw IoError("write failed for '" + file.string() + "'");
}

}  // namespace amad::pnm

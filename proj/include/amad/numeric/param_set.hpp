#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "amad/numeric/tensor.hpp"

namespace amad {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Named collection of trainable tensors with per-entry freeze flags and
/// AdamW moment state.
class ParamSet {
 public:
  struct Entry {
    Tensor value;
    bool frozen = false;
    std::vector<double> m, v;  // AdamW moments, sized on first step
  };

  /// Registers a parameter. Throws ConfigError on a duplicate path.
  Tensor& add(const std::string& path, Tensor value, bool frozen = false) {
    if (entries_.count(path)) throw ConfigError("duplicate parameter path '" + path + "'");
    value.set_requires_grad(!frozen);
    auto& e = entries_[path];
    e.value = std::move(value);
    e.frozen = frozen;
    return e.value;
  }

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }

  const Tensor& at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("unknown parameter path '" + path + "'");
    return it->second.value;
  }
  Tensor& at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ConfigError("unknown parameter path '" + path + "'");
    return it->second.value;
  }

  bool frozen(const std::string& path) const { return entries_.at(path).frozen; }

  void set_frozen(const std::string& path, bool frozen) {
    auto& e = entries_.at(path);
    e.frozen = frozen;
    e.value.set_requires_grad(!frozen);
  }

  /// Freezes every entry whose path does not start with prefix.
  void freeze_all_except(const std::string& prefix) {
    for (auto& [path, e] : entries_) {
      const bool keep = path.rfind(prefix, 0) == 0;
      e.frozen = !keep;
      e.value.set_requires_grad(keep);
    }
  }

  void freeze_all() {
    for (auto& [path, e] : entries_) {
      e.frozen = true;
      e.value.set_requires_grad(false);
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [path, e] : entries_) n += e.value.numel();
    return n;
  }

  long step_count() const { return step_; }

  /// Zeroes gradients of non-frozen entries (allocating them if needed).
  void zero_grad() {
    for (auto& [path, e] : entries_) {
      if (!e.frozen) e.value.zero_grad();
      else e.value.clear_grad();
    }
  }

  /// One decoupled-weight-decay Adam update of every non-frozen entry.
  void adamw_step(const AdamWConfig& cfg) {
    for (const auto& [path, e] : entries_) {
      if (!e.frozen && !e.value.has_grad()) throw StateError("parameter '" + path + "' has no gradient");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (auto& [path, e] : entries_) {
      if (e.frozen) continue;
      auto p = e.value.data();
      auto g = e.value.grad();
      if (e.m.size() != p.size()) {
        e.m.assign(p.size(), 0.0);
        e.v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
        e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        const double mhat = e.m[i] / bc1;
        const double vhat = e.v[i] / bc2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }

  /// FNV-1a over the raw bytes of every entry whose path matches the
  /// predicate, in path order.
  template <class Pred>
  std::uint64_t hash_where(Pred pred) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [path, e] : entries_) {
      if (!pred(path)) continue;
      mix(path.data(), path.size());
      mix(e.value.values().data(), e.value.numel() * sizeof(double));
    }
    return h;
  }

  std::uint64_t hash() const {
    return hash_where([](const std::string&) { return true; });
  }

  /// Independent copy of the entries under a path prefix.
  ParamSet subset(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [path, e] : entries_) {
      if (path.rfind(prefix, 0) == 0) out.add(path, e.value.clone(), e.frozen);
    }
    return out;
  }

  /// Copies values (not moments) of every entry present in both sets.
  void load_values_from(const ParamSet& other) {
    for (auto& [path, e] : entries_) {
      auto it = other.entries_.find(path);
      if (it == other.entries_.end()) continue;
      if (it->second.value.shape() != e.value.shape()) {
        throw ShapeError("parameter '" + path + "' shape " + shape_str(e.value.shape()) + " vs checkpoint " +
                         shape_str(it->second.value.shape()));
      }
      std::copy(it->second.value.values().begin(), it->second.value.values().end(), e.value.values().begin());
    }
  }

  // ---- checkpoint IO --------------------------------------------------------

  static constexpr const char* kMagic = "AMAD01\n";

  void save(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot open '" + file.string() + "' for writing");
    os.write(kMagic, 7);
    for (const auto& [path, e] : entries_) {
      put_u32(os, static_cast<std::uint32_t>(path.size()));
      os.write(path.data(), static_cast<std::streamsize>(path.size()));
      put_u32(os, static_cast<std::uint32_t>(e.value.rank()));
      for (std::size_t ext : e.value.shape()) put_u64(os, ext);
      for (double d : e.value.values()) put_f64(os, d);
      const char flag = e.frozen ? 1 : 0;
      os.write(&flag, 1);
    }
    if (!os) throw IoError("write failed for '" + file.string() + "'");
  }

  static ParamSet load(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open '" + file.string() + "'");
    char magic[7];
    if (!is.read(magic, 7) || std::memcmp(magic, kMagic, 7) != 0) {
      throw IoError("'" + file.string() + "' is not a parameter checkpoint");
    }
    ParamSet ps;
    auto fail = [&file]() -> IoError { return IoError("truncated checkpoint '" + file.string() + "'"); };
    while (is.peek() != std::char_traits<char>::eof()) {
      std::uint32_t len = 0, rank = 0;
      if (!get_u32(is, len)) throw fail();
      std::string path(len, '\0');
      if (!is.read(path.data(), len)) throw fail();
      if (!get_u32(is, rank) || rank == 0 || rank > 16) throw fail();
      Shape shape(rank);
      for (auto& ext : shape) {
        std::uint64_t e64 = 0;
        if (!get_u64(is, e64) || e64 == 0) throw fail();
        ext = static_cast<std::size_t>(e64);
      }
      std::vector<double> vals(shape_numel(shape));
      for (double& d : vals) {
        if (!get_f64(is, d)) throw fail();
      }
      char flag = 0;
      if (!is.read(&flag, 1)) throw fail();
      ps.add(path, Tensor(shape, std::move(vals)), flag != 0);
    }
    return ps;
  }

 private:
  static void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  static void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
  static void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(os, bits);
  }
  static bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
  }
  static bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
  }
  static bool get_f64(std::istream& is, double& d) {
    std::uint64_t bits = 0;
    if (!get_u64(is, bits)) return false;
    std::memcpy(&d, &bits, 8);
    return true;
  }

  std::map<std::string, Entry> entries_;
  long step_ = 0;
};

}  // namespace amad

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "loraserve/errors.hpp"

namespace loraserve {

/// Six-level blocking parameters for the tiled GEMM. outer_* are the
/// cache-level tile edges (matrix staged into a packed block), inner_* the
/// register-level micro-kernel edges that subdivide each outer tile.
struct TilingConfig {
  int outer_m = 0, outer_n = 0, outer_k = 0;
  int inner_m = 0, inner_n = 0, inner_k = 0;

  auto operator<=>(const TilingConfig&) const = default;

  std::size_t footprint_elems() const {
    return std::size_t(outer_m) * outer_k + std::size_t(outer_k) * outer_n +
           std::size_t(outer_m) * outer_n;
  }

  std::array<int, 6> edges() const {
    return {outer_m, outer_n, outer_k, inner_m, inner_n, inner_k};
  }

  // Every edge >= 16 and a power of two; inner edges divide their outer
  // counterpart. Footprint is checked against a budget only at enumeration
  // time, not here: an oversized config still computes correctly.
  bool structurally_valid() const {
    auto pow2_ge16 = [](int e) { return e >= 16 && (e & (e - 1)) == 0; };
    for (int e : edges()) {
      if (!pow2_ge16(e)) return false;
    }
    return inner_m <= outer_m && inner_n <= outer_n && inner_k <= outer_k &&
           outer_m % inner_m == 0 && outer_n % inner_n == 0 &&
           outer_k % inner_k == 0;
  }

  void validate() const {
    if (!structurally_valid()) {
      throw ConfigError("invalid tiling config " + to_string());
    }
  }

  std::string to_string() const {
    std::string s = "(";
    const auto e = edges();
    for (std::size_t i = 0; i < e.size(); ++i) {
      s += std::to_string(e[i]);
      s += (i + 1 < e.size()) ? "," : ")";
    }
    return s;
  }
};

/// Lookup key: m rounded up to the 32-step bucket, k and n exact.
struct ShapeKey {
  int m_bucket = 32;
  int k = 0;
  int n = 0;

  auto operator<=>(const ShapeKey&) const = default;
};

inline int m_bucket_of(std::size_t m) {
  if (m <= 32) return 32;
  return static_cast<int>((m + 31) / 32 * 32);
}

inline ShapeKey shape_key(std::size_t m, std::size_t k, std::size_t n) {
  return ShapeKey{m_bucket_of(m), static_cast<int>(k), static_cast<int>(n)};
}

/// Enumerates every legal config with power-of-two edges in [16, 256] whose
/// packed-tile footprint fits the cache budget. Lexicographic order on the
/// (outer_m, outer_n, outer_k, inner_m, inner_n, inner_k) tuple.
inline std::vector<TilingConfig> candidate_configs(std::size_t cache_budget_bytes,
                                                   std::size_t scalar_width) {
  if (cache_budget_bytes == 0 || scalar_width == 0) {
    throw ConfigError("cache budget and scalar width must be positive");
  }
  static constexpr std::array<int, 5> kEdges = {16, 32, 64, 128, 256};
  std::vector<TilingConfig> out;
  for (int om : kEdges)
    for (int on : kEdges)
      for (int ok : kEdges) {
        const std::size_t footprint =
            (std::size_t(om) * ok + std::size_t(ok) * on + std::size_t(om) * on) *
            scalar_width;
        if (footprint > cache_budget_bytes) continue;
        for (int im : kEdges) {
          if (im > om) break;
          for (int in : kEdges) {
            if (in > on) break;
            for (int ik : kEdges) {
              if (ik > ok) break;
              out.push_back(TilingConfig{om, on, ok, im, in, ik});
            }
          }
        }
      }
  if (out.empty()) {
    throw ConfigError("no feasible tiling config for cache budget " +
                      std::to_string(cache_budget_bytes) + " bytes");
  }
  return out;
}

/// Curated default candidate list used by the offline tuner. Spans small,
/// balanced, and deep-k blockings so shape-dependent winners can emerge
/// while keeping a desk-scale search well under the time budget. The full
/// enumeration from candidate_configs() remains available on request.
inline std::vector<TilingConfig> default_candidates(std::size_t cache_budget_bytes,
                                                    std::size_t scalar_width) {
  const std::vector<TilingConfig> curated = {
      {16, 64, 64, 16, 16, 64},    // small static tiles
      {32, 32, 32, 32, 32, 32},
      {32, 32, 256, 32, 32, 32},
      {64, 32, 32, 32, 32, 32},
      {64, 32, 128, 32, 32, 64},
      {64, 64, 64, 32, 64, 64},
      {64, 64, 128, 32, 32, 32},
      {128, 64, 64, 32, 32, 32},
      {128, 64, 256, 32, 32, 64},
      {128, 128, 64, 64, 32, 32},
      {256, 64, 128, 32, 32, 32},
      {256, 128, 128, 64, 64, 32},
  };
  std::vector<TilingConfig> out;
  for (const auto& c : curated) {
    if (c.footprint_elems() * scalar_width <= cache_budget_bytes) out.push_back(c);
  }
  if (out.empty()) {
    throw ConfigError("no feasible default candidate for cache budget " +
                      std::to_string(cache_budget_bytes) + " bytes");
  }
  return out;
}

/// Shape-keyed result of the offline search. Immutable once the search
/// returns it; lookups are total (nearest bucket, then default).
class TilingTable {
 public:
  struct Entry {
    TilingConfig config;
    std::int64_t measured_ns = 0;
  };

  TilingTable() : default_config_{64, 32, 32, 32, 32, 32} {}
  explicit TilingTable(TilingConfig default_config)
      : default_config_(default_config) {}

  void insert(ShapeKey key, TilingConfig config, std::int64_t measured_ns) {
    config.validate();
    entries_[key] = Entry{config, measured_ns};
  }

  void set_default(TilingConfig config) {
    config.validate();
    default_config_ = config;
  }

  const TilingConfig& default_config() const { return default_config_; }
  const std::map<ShapeKey, Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  /// Exact bucket hit wins; otherwise the nearest m-bucket with the same
  /// (k, n) if it is within one bucket step; otherwise the default config.
  TilingConfig lookup(std::size_t m, std::size_t k, std::size_t n) const {
    const ShapeKey key = shape_key(m, k, n);
    if (auto it = entries_.find(key); it != entries_.end()) {
      return it->second.config;
    }
    const TilingConfig* best = nullptr;
    int best_dist = 0;
    for (const auto& [ek, entry] : entries_) {
      if (ek.k != key.k || ek.n != key.n) continue;
      const int dist = std::abs(ek.m_bucket - key.m_bucket);
      if (best == nullptr || dist < best_dist) {
        best = &entry.config;
        best_dist = dist;
      }
      // std::map iterates m_bucket ascending, so ties keep the smaller bucket.
    }
    if (best != nullptr && best_dist <= 32) return *best;
    return default_config_;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["default"] = default_config_.edges();
    j["entries"] = nlohmann::json::array();
    for (const auto& [key, entry] : entries_) {
      nlohmann::json e;
      e["m_bucket"] = key.m_bucket;
      e["k"] = key.k;
      e["n"] = key.n;
      e["config"] = entry.config.edges();
      e["ns"] = entry.measured_ns;
      j["entries"].push_back(e);
    }
    return j;
  }

  static TilingTable from_json(const nlohmann::json& j) {
    auto cfg_of = [](const nlohmann::json& arr) {
      if (!arr.is_array() || arr.size() != 6) {
        throw IoError("tiling config must be an array of 6 ints");
      }
      return TilingConfig{arr[0], arr[1], arr[2], arr[3], arr[4], arr[5]};
    };
    TilingTable table(cfg_of(j.at("default")));
    table.default_config_.validate();
    for (const auto& e : j.at("entries")) {
      table.insert(ShapeKey{e.at("m_bucket"), e.at("k"), e.at("n")},
                   cfg_of(e.at("config")), e.at("ns"));
    }
    return table;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path.string());
    out << to_json().dump(2) << "\n";
  }

  static TilingTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad tiling table " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  std::map<ShapeKey, Entry> entries_;
  TilingConfig default_config_;
};

}  // namespace loraserve

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "loraserve/matrix.hpp"
#include "loraserve/random.hpp"
#include "loraserve/tiling.hpp"

namespace loraserve {

/// Test instrumentation: receives every (i, j, p) index triple the tiled
/// loop nest accumulates. Only wired through on small shapes.
using TripleSink = std::function<void(std::size_t i, std::size_t j, std::size_t p)>;

namespace detail {

inline int env_thread_count() {
  if (const char* v = std::getenv("LORASERVE_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

// One (outer_m x outer_k) by (outer_k x outer_n) block pair, already packed
// contiguously. Micro-kernel sweeps inner tiles with clamped bounds; the
// innermost loop runs along contiguous B and C rows.
template <typename T>
void block_multiply(const T* apack, const T* bpack, T* c, std::size_t c_stride,
                    std::size_t mb, std::size_t nb, std::size_t kb,
                    const TilingConfig& cfg, std::size_t gi0, std::size_t gj0,
                    std::size_t gp0, const TripleSink* sink) {
  const std::size_t im = cfg.inner_m, in = cfg.inner_n, ik = cfg.inner_k;
  for (std::size_t ii0 = 0; ii0 < mb; ii0 += im) {
    const std::size_t ilim = std::min(ii0 + im, mb);
    for (std::size_t pp0 = 0; pp0 < kb; pp0 += ik) {
      const std::size_t plim = std::min(pp0 + ik, kb);
      for (std::size_t jj0 = 0; jj0 < nb; jj0 += in) {
        const std::size_t jlim = std::min(jj0 + in, nb);
        if (sink) {
          for (std::size_t i = ii0; i < ilim; ++i)
            for (std::size_t p = pp0; p < plim; ++p)
              for (std::size_t j = jj0; j < jlim; ++j)
                (*sink)(gi0 + i, gj0 + j, gp0 + p);
        }
        for (std::size_t i = ii0; i < ilim; ++i) {
          T* crow = c + i * c_stride + jj0;
          const T* arow = apack + i * kb;
          for (std::size_t p = pp0; p < plim; ++p) {
            const T aval = arow[p];
            const T* brow = bpack + p * nb + jj0;
            const std::size_t span = jlim - jj0;
            for (std::size_t j = 0; j < span; ++j) crow[j] += aval * brow[j];
          }
        }
      }
    }
  }
}

template <typename T>
void pack_block(ConstMatSpan<T> src, std::size_t r0, std::size_t c0,
                std::size_t rb, std::size_t cb, T* dst) {
  for (std::size_t i = 0; i < rb; ++i) {
    const T* s = src.data + (r0 + i) * src.cols + c0;
    std::copy(s, s + cb, dst + i * cb);
  }
}

// Full (p0 -> i0 -> j0) nest over one range of outer row blocks. Edge
// blocks use clamped extents; nothing is padded.
template <typename T>
void tiled_nest(ConstMatSpan<T> a, ConstMatSpan<T> b, MatSpan<T> c,
                const TilingConfig& cfg, std::size_t i_begin, std::size_t i_end,
                const TripleSink* sink) {
  const std::size_t k = a.cols, n = b.cols;
  const std::size_t om = cfg.outer_m, on = cfg.outer_n, ok = cfg.outer_k;
  // Reused packing scratch; per-call allocation would swamp small GEMMs.
  static thread_local std::vector<T> apack, bpack;
  apack.resize(om * ok);
  bpack.resize(ok * on);
  for (std::size_t p0 = 0; p0 < k; p0 += ok) {
    const std::size_t kb = std::min(ok, k - p0);
    for (std::size_t i0 = i_begin; i0 < i_end; i0 += om) {
      const std::size_t mb = std::min(om, i_end - i0);
      pack_block(a, i0, p0, mb, kb, apack.data());
      for (std::size_t j0 = 0; j0 < n; j0 += on) {
        const std::size_t nb = std::min(on, n - j0);
        pack_block(b, p0, j0, kb, nb, bpack.data());
        block_multiply(apack.data(), bpack.data(), c.data + i0 * c.cols + j0,
                       c.cols, mb, nb, kb, cfg, i0, j0, p0, sink);
      }
    }
  }
}

}  // namespace detail

/// Tiled GEMM into a caller-provided output block (zeroed here). The output
/// is never padded: edge tiles run with clamped loop bounds.
template <typename T>
void atmm_multiply_into(ConstMatSpan<T> a, ConstMatSpan<T> b, MatSpan<T> c,
                        const TilingConfig& cfg,
                        const TripleSink* sink = nullptr) {
  if (a.cols != b.rows) {
    throw ShapeError(a.rows, a.cols, b.rows, b.cols, "atmm_multiply");
  }
  if (c.rows != a.rows || c.cols != b.cols) {
    throw ShapeError(c.rows, c.cols, a.rows, b.cols, "atmm_multiply output");
  }
  cfg.validate();
  const std::size_t m = a.rows, n = b.cols, k = a.cols;
  flops::add(2ull * m * n * k);
  std::fill(c.data, c.data + m * n, T(0));

  const int threads = sink ? 1 : detail::env_thread_count();
  if (threads <= 1 || m < 2 * std::size_t(cfg.outer_m)) {
    detail::tiled_nest(a, b, c, cfg, 0, m, sink);
    return;
  }
  // Split outer row blocks across workers; output row ranges are disjoint.
  const std::size_t blocks = (m + cfg.outer_m - 1) / cfg.outer_m;
  const std::size_t per = (blocks + threads - 1) / threads;
  std::vector<std::jthread> pool;
  for (int t = 0; t < threads; ++t) {
    const std::size_t lo = std::min(m, t * per * cfg.outer_m);
    const std::size_t hi = std::min(m, (t + 1) * per * cfg.outer_m);
    if (lo >= hi) break;
    pool.emplace_back(
        [=]() { detail::tiled_nest(a, b, c, cfg, lo, hi, nullptr); });
  }
}

template <typename T>
Matrix<T> atmm_multiply(ConstMatSpan<T> a, ConstMatSpan<T> b,
                        const TilingConfig& cfg,
                        const TripleSink* sink = nullptr) {
  if (a.cols != b.rows) {
    throw ShapeError(a.rows, a.cols, b.rows, b.cols, "atmm_multiply");
  }
  Matrix<T> c(a.rows, b.cols);
  atmm_multiply_into<T>(a, b, c, cfg, sink);
  return c;
}

// ---------------------------------------------------------------------------
// Offline profiling.
// ---------------------------------------------------------------------------

struct BenchResult {
  std::int64_t median_ns = 0;
  bool timer_warning = false;  // set when the clock is coarser than the run
};

namespace detail {
inline std::int64_t steady_resolution_ns() {
  static const std::int64_t res = [] {
    using clock = std::chrono::steady_clock;
    std::int64_t best = 1'000'000;
    for (int i = 0; i < 16; ++i) {
      auto t0 = clock::now();
      auto t1 = clock::now();
      while (t1 == t0) t1 = clock::now();
      best = std::min<std::int64_t>(
          best, std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0)
                    .count());
    }
    return std::max<std::int64_t>(best, 1);
  }();
  return res;
}
}  // namespace detail

/// Median wall-clock of `trials` runs on freshly randomized operands, after
/// one warm-up run. Operand buffers are allocated once and re-randomized in
/// place between trials, so page faults and allocator placement do not leak
/// into the samples. Monotonic clock; median resists scheduler noise.
inline BenchResult benchmark_config(std::size_t m, std::size_t k, std::size_t n,
                                    const TilingConfig& cfg, int trials,
                                    std::uint64_t seed = 0x5eedbeef) {
  if (trials < 3) throw ConfigError("benchmark_config needs trials >= 3");
  cfg.validate();
  using clock = std::chrono::steady_clock;
  Rng rng(seed);
  Matrix<float> a(m, k);
  Matrix<float> b(k, n);
  Matrix<float> c(m, n);

  std::vector<std::int64_t> samples;
  samples.reserve(trials);
  for (int t = 0; t < trials + 1; ++t) {  // first iteration is the warm-up
    fill_uniform<float>(a, rng);
    fill_uniform<float>(b, rng);
    const auto t0 = clock::now();
    atmm_multiply_into<float>(a, b, c, cfg);
    const auto t1 = clock::now();
    if (t == 0) continue;
    samples.push_back(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  BenchResult r;
  r.median_ns = samples[samples.size() / 2];
  r.timer_warning = r.median_ns < detail::steady_resolution_ns();
  return r;
}

struct GemmShape {
  std::size_t m = 0, k = 0, n = 0;
};

/// Robust scores for a whole (shape x config) grid. Every round sweeps the
/// entire grid before any point is sampled again, and a point's score is the
/// median of its round medians. Host noise comes in multi-second phases;
/// sampling one point's rounds back to back would let different points land
/// in different phases and misrank near ties, so rounds are interleaved at
/// the outermost level and the full sweep spans several phases. Points that
/// fail to benchmark score INT64_MAX.
inline std::vector<std::vector<std::int64_t>> grid_bench_ns(
    const std::vector<GemmShape>& shapes,
    const std::vector<TilingConfig>& configs, int trials, int rounds = 3,
    std::vector<std::string>* failures = nullptr) {
  std::vector<std::vector<std::vector<std::int64_t>>> samples(
      shapes.size(), std::vector<std::vector<std::int64_t>>(configs.size()));
  std::vector<std::vector<char>> failed(shapes.size(),
                                        std::vector<char>(configs.size(), 0));
  for (int round = 0; round < rounds; ++round) {
    for (std::size_t si = 0; si < shapes.size(); ++si) {
      for (std::size_t ci = 0; ci < configs.size(); ++ci) {
        if (failed[si][ci]) continue;
        try {
          samples[si][ci].push_back(
              benchmark_config(shapes[si].m, shapes[si].k, shapes[si].n,
                               configs[ci], trials, 0x5eedbeef + round)
                  .median_ns);
        } catch (const Error& e) {
          failed[si][ci] = 1;
          if (failures) {
            failures->push_back(
                "shape " + std::to_string(shapes[si].m) + "x" +
                std::to_string(shapes[si].k) + "x" +
                std::to_string(shapes[si].n) + " config " +
                configs[ci].to_string() + ": " + e.what());
          }
        }
      }
    }
  }
  std::vector<std::vector<std::int64_t>> scores(
      shapes.size(), std::vector<std::int64_t>(
                         configs.size(), std::numeric_limits<std::int64_t>::max()));
  for (std::size_t si = 0; si < shapes.size(); ++si) {
    for (std::size_t ci = 0; ci < configs.size(); ++ci) {
      if (failed[si][ci] || samples[si][ci].empty()) continue;
      std::sort(samples[si][ci].begin(), samples[si][ci].end());
      scores[si][ci] = samples[si][ci][samples[si][ci].size() / 2];
    }
  }
  return scores;
}

/// Benchmarks every candidate for every grid shape (strictly sequentially)
/// and records the per-shape argmin, ties broken by the lexicographically
/// smallest config. The most frequent winner becomes the table default.
/// Per-shape failures are reported and skipped, never fatal.
inline TilingTable tiling_search(const std::vector<GemmShape>& shape_grid,
                                 const std::vector<TilingConfig>& candidates,
                                 int trials,
                                 std::vector<std::string>* failures = nullptr) {
  if (shape_grid.empty() || candidates.empty()) {
    throw ConfigError("tiling_search needs a nonempty grid and candidates");
  }
  TilingTable table;
  std::map<TilingConfig, int> wins;
  const std::vector<std::vector<std::int64_t>> grid_scores =
      grid_bench_ns(shape_grid, candidates, trials, 3, failures);
  for (std::size_t si = 0; si < shape_grid.size(); ++si) {
    const auto& shape = shape_grid[si];
    const std::vector<std::int64_t>& scores = grid_scores[si];
    const TilingConfig* best = nullptr;
    std::int64_t best_ns = 0;
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
      if (scores[ci] == std::numeric_limits<std::int64_t>::max()) continue;
      if (best == nullptr || scores[ci] < best_ns ||
          (scores[ci] == best_ns && candidates[ci] < *best)) {
        best = &candidates[ci];
        best_ns = scores[ci];
      }
    }
    if (best == nullptr) {
      if (failures) {
        failures->push_back("shape " + std::to_string(shape.m) + "x" +
                            std::to_string(shape.k) + "x" +
                            std::to_string(shape.n) +
                            ": all candidates failed, omitted");
      }
      continue;
    }
    const ShapeKey key = shape_key(shape.m, shape.k, shape.n);
    const auto& existing = table.entries();
    auto it = existing.find(key);
    if (it == existing.end() || best_ns < it->second.measured_ns) {
      table.insert(key, *best, best_ns);
    }
    wins[*best] += 1;
  }
  if (!wins.empty()) {
    // std::map order makes the tie-break lexicographic automatically.
    const TilingConfig* top = nullptr;
    int top_count = -1;
    for (const auto& [cfg, count] : wins) {
      if (count > top_count) {
        top = &cfg;
        top_count = count;
      }
    }
    table.set_default(*top);
  }
  return table;
}

/// Convenience alias for the table lookup, mirroring the runtime call site.
inline TilingConfig lookup_config(const TilingTable& table, std::size_t m,
                                  std::size_t k, std::size_t n) {
  return table.lookup(m, k, n);
}

/// Default desk-scale shape grid for a model of hidden dimension d: the
/// forward/merge shapes plus rank-shaped right operands so adapter bypass
/// GEMMs get first-class entries.
inline std::vector<GemmShape> default_shape_grid(
    std::size_t d, const std::vector<std::size_t>& ranks = {16, 32, 64, 128}) {
  std::vector<GemmShape> grid;
  for (std::size_t m : {std::size_t(32), std::size_t(64), std::size_t(128),
                        std::size_t(256), std::size_t(512), std::size_t(1024),
                        std::size_t(2048), std::size_t(4096)}) {
    grid.push_back({m, d, d});
  }
  for (std::size_t r : ranks) {
    grid.push_back({256, d, r});   // bypass down-projection
    grid.push_back({256, r, d});   // bypass up-projection
    grid.push_back({d, r, d});     // delta-weight product at merge time
  }
  return grid;
}

}  // namespace loraserve

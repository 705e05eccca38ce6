// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <vector>

#include "loraserve/adapter.hpp"
#include "loraserve/atmm.hpp"
#include "loraserve/matrix.hpp"
#include "loraserve/tiling.hpp"

namespace loraserve {

/// Rows of one batch that share an adapter. Row indices keep their original
/// batch order, so grouping is stable.
struct Segment {
  int adapter_id = 0;
  std::vector<std::size_t> rows;
};

/// Segments partition the batch rows exactly, ordered by adapter id.
struct BatchPlan {
  std::vector<Segment> segments;
  std::size_t total_rows = 0;
};

inline BatchPlan plan_batch(std::span<const int> assignment) {
  if (assignment.empty()) {
    throw ConfigError("plan_batch needs a nonempty assignment");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t row = 0; row < assignment.size(); ++row) {
    groups[assignment[row]].push_back(row);
  }
  BatchPlan plan;
  plan.total_rows = assignment.size();
  for (auto& [id, rows] : groups) {
    plan.segments.push_back(Segment{id, std::move(rows)});
  }
  return plan;
}

/// Per-segment bypass: gather the segment's rows into a dense block, run the
/// two low-rank GEMMs at the segment's own rank, scatter back. No row or
/// rank padding anywhere, so the multiply-add count is exactly
/// sum over segments of n_seg * 2 * d * r * 2.
inline Matrix<float> run_bypass(ConstMatSpan<float> x, const BatchPlan& plan,
                                const AdapterSet& adapters, std::size_t layer,
                                const TilingTable& table) {
  if (x.rows != plan.total_rows) {
    throw ShapeError("run_bypass: batch has " + std::to_string(x.rows) +
                     " rows but plan covers " + std::to_string(plan.total_rows));
  }
  const std::size_t d = x.cols;
  Matrix<float> out(x.rows, d);
  for (const Segment& seg : plan.segments) {
    const LoraAdapter& adapter = adapter_at(adapters, seg.adapter_id);
    const std::size_t ns = seg.rows.size();
    const std::size_t r = adapter.rank();

    Matrix<float> gathered(ns, d);
    for (std::size_t i = 0; i < ns; ++i) {
      const float* src = x.data + seg.rows[i] * d;
      std::copy(src, src + d, gathered.data() + i * d);
    }

    Matrix<float> mid(ns, r);
    atmm_multiply_into<float>(gathered, adapter.down(layer), mid,
                              table.lookup(ns, d, r));
    Matrix<float> contrib(ns, d);
    atmm_multiply_into<float>(mid, adapter.up(layer), contrib,
                              table.lookup(ns, r, d));

    for (std::size_t i = 0; i < ns; ++i) {
      std::copy(contrib.data() + i * d, contrib.data() + (i + 1) * d,
                out.data() + seg.rows[i] * d);
    }
  }
  return out;
}

}  // namespace loraserve

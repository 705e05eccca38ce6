// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <vector>

#include "loraserve/request.hpp"

namespace loraserve {

struct SchedulerConfig {
  int max_bs = 8;          // batch row budget per scheduling decision
  double theta_ms = 1.0;   // starvation threshold, > 0
};

struct Ewma {
  double value = 0.0;
  bool seen = false;

  void update(double x, double alpha) {
    value = seen ? alpha * x + (1.0 - alpha) * value : x;
    seen = true;
  }
  double or_zero() const { return seen ? value : 0.0; }
};

/// Running estimates fed into the credit formula: per-mode execution time of
/// one batched round, and per-transition mode-switch latency. Updated online
/// from observed durations (exponentially weighted, alpha = 0.2).
struct LatencyEstimates {
  static constexpr double kAlpha = 0.2;
  std::array<Ewma, 3> exec_ms;                 // indexed by InferMode
  std::array<std::array<Ewma, 3>, 3> switch_ms; // [from][to]

  double exec(InferMode m) const { return exec_ms[int(m)].or_zero(); }
  double switch_cost(InferMode from, InferMode to) const {
    return switch_ms[int(from)][int(to)].or_zero();
  }
  void observe_exec(InferMode m, double ms) { exec_ms[int(m)].update(ms, kAlpha); }
  void observe_switch(InferMode from, InferMode to, double ms) {
    switch_ms[int(from)][int(to)].update(ms, kAlpha);
  }
};

namespace detail {
// A mode serves a request if the request can run a round in it without any
// further switch: unmerged and mixture serve everything, merged serves only
// its own adapter's requests.
inline bool mode_serves(InferMode mode, int merged_adapter, const Request& r) {
  return mode != InferMode::Merged || r.adapter_id == merged_adapter;
}

inline double cheapest_switch_ms(InferMode mode, int merged_adapter,
                                 const Request& r,
                                 const LatencyEstimates& est) {
  if (mode_serves(mode, merged_adapter, r)) return 0.0;
  // Only reachable from merged state: pick the cheapest way out.
  const double to_mix = est.switch_cost(InferMode::Merged, InferMode::Mixture);
  const double to_unm = est.switch_cost(InferMode::Merged, InferMode::Unmerged);
  const double to_mer = est.switch_cost(InferMode::Merged, InferMode::Merged);
  return std::min({to_mix, to_unm, to_mer});
}
}  // namespace detail

/// credit = waiting time + estimated execution in the current mode +
/// estimated switch cost to the cheapest mode that can serve the request.
/// Requests inside the current batch keep the credit they were batched
/// with; queued credits never decrease.
inline void update_credits(std::vector<Request>& queue, double now_ms,
                           InferMode mode, int merged_adapter,
                           const LatencyEstimates& est) {
  for (Request& r : queue) {
    if (r.state != RequestState::Queued) continue;
    const double waiting = std::max(0.0, now_ms - r.arrival_ms);
    const double fresh = waiting + est.exec(mode) +
                         detail::cheapest_switch_ms(mode, merged_adapter, r, est);
    r.credit_ms = std::max(r.credit_ms, fresh);
  }
}

struct SchedulingDecision {
  InferMode mode = InferMode::Unmerged;
  int target_adapter = -1;  // meaningful for merged / mixture
  std::vector<std::size_t> batch;  // indices into the queue snapshot
};

/// The scheduling policy, pure over its inputs:
///   R_starve = requests with credit > theta
///   len      = MaxBS - |R_starve|
///   R_merge  = requests of the most-queued adapter (ties: lowest id)
///   if |R_starve|/MaxBS <= 0.5 and |R_merge|/MaxBS > 0.5:
///     no starvation  -> merged,  batch = R_merge[:MaxBS]
///     else           -> mixture, batch = R_starve + (R_merge - R_starve)[:len]
///   else             -> unmerged, batch = R_starve + (R - R_starve)[:len]
/// All prefix selections are in arrival order.
inline SchedulingDecision schedule(const std::vector<Request>& queue,
                                   InferMode mode, int merged_adapter,
                                   const SchedulerConfig& config) {
  SchedulingDecision out;
  out.mode = mode;
  out.target_adapter = merged_adapter;

  std::vector<std::size_t> pending;  // arrival order == queue order
  for (std::size_t i = 0; i < queue.size(); ++i) {
    if (queue[i].state != RequestState::Done) pending.push_back(i);
  }
  if (pending.empty()) return out;

  const std::size_t max_bs = static_cast<std::size_t>(config.max_bs);
  std::vector<std::size_t> starving;
  std::vector<char> is_starving(queue.size(), 0);
  for (std::size_t i : pending) {
    if (queue[i].credit_ms > config.theta_ms) {
      starving.push_back(i);
      is_starving[i] = 1;
    }
  }

  std::map<int, std::size_t> per_adapter;
  for (std::size_t i : pending) per_adapter[queue[i].adapter_id] += 1;
  int hot_adapter = per_adapter.begin()->first;
  std::size_t hot_count = 0;
  for (const auto& [id, count] : per_adapter) {
    if (count > hot_count) {  // map order breaks ties toward the lowest id
      hot_adapter = id;
      hot_count = count;
    }
  }
  std::vector<std::size_t> merge_class;
  for (std::size_t i : pending) {
    if (queue[i].adapter_id == hot_adapter) merge_class.push_back(i);
  }

  const std::size_t len = starving.size() >= max_bs ? 0 : max_bs - starving.size();
  const bool few_starving = double(starving.size()) / double(max_bs) <= 0.5;
  const bool merge_heavy = double(merge_class.size()) / double(max_bs) > 0.5;

  if (few_starving && merge_heavy) {
    if (starving.empty()) {
      out.mode = InferMode::Merged;
      out.target_adapter = hot_adapter;
      for (std::size_t i : merge_class) {
        if (out.batch.size() == max_bs) break;
        out.batch.push_back(i);
      }
    } else {
      out.mode = InferMode::Mixture;
      out.target_adapter = hot_adapter;
      out.batch = starving;
      for (std::size_t i : merge_class) {
        if (out.batch.size() >= starving.size() + len) break;
        if (!is_starving[i]) out.batch.push_back(i);
      }
    }
  } else {
    out.mode = InferMode::Unmerged;
    out.target_adapter = -1;
    for (std::size_t i : starving) {
      if (out.batch.size() == max_bs) break;
      out.batch.push_back(i);
    }
    for (std::size_t i : pending) {
      if (out.batch.size() >= starving.size() + len) break;
      if (out.batch.size() == max_bs) break;
      if (!is_starving[i]) out.batch.push_back(i);
    }
  }
  return out;
}

}  // namespace loraserve

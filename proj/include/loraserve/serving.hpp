// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loraserve/batch.hpp"
#include "loraserve/model.hpp"
#include "loraserve/request.hpp"
#include "loraserve/scheduler.hpp"
#include "loraserve/tiling.hpp"

namespace loraserve {

/// Points the subtraction branch at the merged adapter's factor pair
/// (shared, never copied). Must agree with the folded-in adapter.
inline void init_delora(ModelState& state, const LoraAdapter& merged_adapter) {
  if (state.merged_adapter != merged_adapter.id()) {
    throw ModeError("deLoRA branch must reference the merged adapter");
  }
  state.delora_branch = &merged_adapter;
}

/// Performs the minimal sequence of one-shot un/merge calls for a mode
/// transition and returns its measured latency. Merged -> mixture of the
/// same adapter touches no weights at all: it only initializes the
/// subtraction branch.
inline DurationNs mode_switch(BaseModel& model, ModelState& state,
                              InferMode to_mode, int target_adapter,
                              const AdapterSet& adapters,
                              const TilingTable& table) {
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration_cast<DurationNs>(
        std::chrono::steady_clock::now() - t0);
  };

  if (to_mode == InferMode::Unmerged) {
    if (state.mode != InferMode::Unmerged) {
      unmerge(model, state, adapter_at(adapters, state.merged_adapter), table);
    }
    return elapsed();
  }

  if (target_adapter < 0) {
    throw ModeError("merged/mixture transition needs a target adapter");
  }
  const LoraAdapter& target = adapter_at(adapters, target_adapter);
  if (state.mode != InferMode::Unmerged &&
      state.merged_adapter != target_adapter) {
    unmerge(model, state, adapter_at(adapters, state.merged_adapter), table);
  }
  if (state.mode == InferMode::Unmerged) {
    merge(model, state, target, table);
  }
  if (to_mode == InferMode::Mixture) {
    init_delora(state, target);
    state.mode = InferMode::Mixture;
  } else {
    state.delora_branch = nullptr;
    state.mode = InferMode::Merged;
  }
  return elapsed();
}

struct RequestRecord {
  std::int64_t id = 0;
  int adapter_id = 0;
  double arrival_ms = 0.0;
  double start_ms = 0.0;
  double finish_ms = 0.0;
  int rounds = 0;  // decode rounds executed (output tokens)
  double e2e_ms = 0.0;
  int input_tokens = 0;
};

struct ModeSpan {
  InferMode mode;
  double from_ms = 0.0;
  double to_ms = 0.0;
};

struct Metrics {
  double avg_token_latency_ms = 0.0;
  double throughput_rps = 0.0;
  std::vector<RequestRecord> per_request;
  std::vector<ModeSpan> mode_timeline;
  int switches = 0;
  double switch_time_ms = 0.0;
  double mode_occupancy[3] = {0, 0, 0};  // fraction of execution time
  int budget_violations = 0;
  double makespan_ms = 0.0;
  double busy_ms = 0.0;
  // Diagnostics for the starvation-bound checks.
  double max_queue_wait_ms = 0.0;
  double max_batch_ms = 0.0;
  double max_switch_ms = 0.0;
  double max_theta_ms = 0.0;
  int unserved = 0;
};

struct ServeConfig {
  int max_bs = 8;
  double theta_factor = 5.0;      // theta = factor x EWMA batch duration
  double warmup_theta_ms = 1.0;   // used until the first batch lands
  std::optional<InferMode> forced_mode;  // ablation override
  int adapter_cache_capacity = 0;  // 0 = unlimited (no swap modeling)
  double adapter_load_ms = 0.0;    // charge on first use after eviction
  std::uint64_t seed = 7;
};

namespace detail {

// Fixed-capacity LRU over adapter ids; reduces host-memory adapter swapping
// to a constant load charge on a miss.
class AdapterCache {
 public:
  AdapterCache(int capacity, double load_ms)
      : capacity_(capacity), load_ms_(load_ms) {}

  double touch(int id) {
    if (capacity_ <= 0) return 0.0;
    auto it = std::find(lru_.begin(), lru_.end(), id);
    if (it != lru_.end()) {
      lru_.erase(it);
      lru_.push_back(id);
      return 0.0;
    }
    lru_.push_back(id);
    if (lru_.size() > static_cast<std::size_t>(capacity_)) lru_.pop_front();
    return load_ms_;
  }

 private:
  int capacity_;
  double load_ms_;
  std::deque<int> lru_;
};

inline double ms_of(DurationNs ns) {
  return std::chrono::duration<double, std::milli>(ns).count();
}

inline int most_queued_adapter(const std::vector<Request>& queue) {
  std::map<int, int> counts;
  for (const Request& r : queue) {
    if (r.state != RequestState::Done) counts[r.adapter_id] += 1;
  }
  int best = -1, best_n = 0;
  for (const auto& [id, n] : counts) {
    if (n > best_n) {
      best = id;
      best_n = n;
    }
  }
  return best;
}

// Single-mode ablation baselines: merge-only serves the most-queued adapter
// FCFS, the other two take the head of the queue FCFS.
inline SchedulingDecision forced_schedule(const std::vector<Request>& queue,
                                          InferMode mode, int max_bs) {
  SchedulingDecision out;
  out.mode = mode;
  out.target_adapter = -1;
  if (mode != InferMode::Unmerged) {
    out.target_adapter = most_queued_adapter(queue);
    if (out.target_adapter < 0) return out;
  }
  for (std::size_t i = 0; i < queue.size(); ++i) {
    if (out.batch.size() == static_cast<std::size_t>(max_bs)) break;
    const Request& r = queue[i];
    if (r.state == RequestState::Done) continue;
    if (mode == InferMode::Merged && r.adapter_id != out.target_adapter) continue;
    out.batch.push_back(i);
  }
  return out;
}

}  // namespace detail

/// Continuous-batching serving loop at decode-round granularity on a virtual
/// clock: execution and switch costs are measured on the real hardware and
/// advance the clock; idle gaps between arrivals are skipped. Each iteration
/// admits arrivals, refreshes credits, schedules, switches mode if the
/// decision changed, runs one round for every batched request (a request's
/// first round is its prefill over input_len rows), and retires finished
/// requests.
inline Metrics serve_loop(BaseModel& model, const AdapterSet& adapters,
                          std::vector<Request> trace, const ServeConfig& config,
                          const TilingTable& table) {
  std::stable_sort(trace.begin(), trace.end(),
                   [](const Request& a, const Request& b) {
                     return a.arrival_ms < b.arrival_ms;
                   });
  for (const Request& r : trace) {
    const LoraAdapter& a = adapter_at(adapters, r.adapter_id);
    if (r.head == HeadKind::Task && !a.has_task_head()) {
      throw ConfigError("request " + std::to_string(r.id) +
                        " needs a task head that adapter " +
                        std::to_string(r.adapter_id) + " does not have");
    }
  }

  Metrics metrics;
  if (trace.empty()) return metrics;

  ModelState state;
  LatencyEstimates estimates;
  SchedulerConfig sched{config.max_bs, config.warmup_theta_ms};
  detail::AdapterCache cache(config.adapter_cache_capacity,
                             config.adapter_load_ms);
  Rng rng(config.seed);

  std::vector<Request> queue;  // arrival order; finished entries keep records
  std::size_t next_arrival = 0;
  double now = 0.0;
  const double first_arrival = trace.front().arrival_ms;
  const std::size_t d = model.hidden_dim();

  auto pending_count = [&] {
    std::size_t n = 0;
    for (const Request& r : queue) {
      if (r.state != RequestState::Done) ++n;
    }
    return n;
  };

  while (true) {
    if (pending_count() == 0) {
      if (next_arrival >= trace.size()) break;
      now = std::max(now, trace[next_arrival].arrival_ms);
    }
    while (next_arrival < trace.size() &&
           trace[next_arrival].arrival_ms <= now) {
      queue.push_back(trace[next_arrival]);
      ++next_arrival;
    }

    sched.theta_ms = estimates.exec_ms[int(state.mode)].seen
                         ? config.theta_factor * estimates.exec(state.mode)
                         : config.warmup_theta_ms;
    sched.theta_ms = std::max(sched.theta_ms, 1e-6);
    metrics.max_theta_ms = std::max(metrics.max_theta_ms, sched.theta_ms);

    update_credits(queue, now, state.mode, state.merged_adapter, estimates);
    const SchedulingDecision decision =
        config.forced_mode
            ? detail::forced_schedule(queue, *config.forced_mode, config.max_bs)
            : schedule(queue, state.mode, state.merged_adapter, sched);
    if (decision.batch.empty()) continue;

    const bool mode_changed =
        decision.mode != state.mode ||
        (decision.mode != InferMode::Unmerged &&
         decision.target_adapter != state.merged_adapter);
    if (mode_changed) {
      const InferMode from = state.mode;
      const DurationNs sw = mode_switch(model, state, decision.mode,
                                        decision.target_adapter, adapters, table);
      const double sw_ms = detail::ms_of(sw);
      estimates.observe_switch(from, decision.mode, sw_ms);
      metrics.switches += 1;
      metrics.switch_time_ms += sw_ms;
      metrics.max_switch_ms = std::max(metrics.max_switch_ms, sw_ms);
      metrics.busy_ms += sw_ms;
      now += sw_ms;
    }

    // Assemble the round: prefill rows for first-round requests, one decode
    // row otherwise.
    std::size_t total_rows = 0;
    for (std::size_t qi : decision.batch) {
      total_rows += queue[qi].rounds_done == 0
                        ? static_cast<std::size_t>(queue[qi].input_len)
                        : 1;
    }
    Matrix<float> x(total_rows, d);
    fill_uniform<float>(x, rng);
    std::vector<int> assignment(total_rows);
    std::vector<std::size_t> head_row(decision.batch.size());
    {
      std::size_t row = 0;
      for (std::size_t bi = 0; bi < decision.batch.size(); ++bi) {
        const Request& r = queue[decision.batch[bi]];
        const std::size_t rows =
            r.rounds_done == 0 ? static_cast<std::size_t>(r.input_len) : 1;
        for (std::size_t j = 0; j < rows; ++j) assignment[row + j] = r.adapter_id;
        head_row[bi] = row + rows - 1;
        row += rows;
      }
    }

    double penalty_ms = 0.0;
    for (std::size_t qi : decision.batch) {
      penalty_ms += cache.touch(queue[qi].adapter_id);
    }

    const auto t0 = std::chrono::steady_clock::now();
    Matrix<float> hidden =
        state.mode == InferMode::Merged
            ? forward_merged(model, state, x, table)
        : state.mode == InferMode::Mixture
            ? forward_mixture(model, state, x, assignment, adapters, table)
            : forward_unmerged(model, state, x, assignment, adapters, table);
    for (std::size_t bi = 0; bi < decision.batch.size(); ++bi) {
      const Request& r = queue[decision.batch[bi]];
      ConstMatSpan<float> hrow(hidden.data() + head_row[bi] * d, 1, d);
      if (r.head == HeadKind::Task) {
        const LoraAdapter& a = adapter_at(adapters, r.adapter_id);
        atmm_multiply<float>(hrow, a.task_head_t(),
                             table.lookup(1, d, a.task_head().rows()));
      } else {
        atmm_multiply<float>(hrow, model.lm_head_t(),
                             table.lookup(1, d, model.vocab_size()));
      }
    }
    const double exec_ms =
        detail::ms_of(std::chrono::duration_cast<DurationNs>(
            std::chrono::steady_clock::now() - t0)) +
        penalty_ms;

    estimates.observe_exec(state.mode, exec_ms);
    metrics.max_batch_ms = std::max(metrics.max_batch_ms, exec_ms);
    metrics.busy_ms += exec_ms;
    if (!metrics.mode_timeline.empty() &&
        metrics.mode_timeline.back().mode == state.mode &&
        metrics.mode_timeline.back().to_ms == now) {
      metrics.mode_timeline.back().to_ms = now + exec_ms;
    } else {
      metrics.mode_timeline.push_back(ModeSpan{state.mode, now, now + exec_ms});
    }
    now += exec_ms;

    for (std::size_t qi : decision.batch) {
      Request& r = queue[qi];
      if (r.rounds_done == 0) {
        r.start_ms = now - exec_ms;
        metrics.max_queue_wait_ms =
            std::max(metrics.max_queue_wait_ms, r.start_ms - r.arrival_ms);
      }
      r.rounds_done += 1;
      if (r.rounds_done >= r.effective_rounds()) {
        r.state = RequestState::Done;
        r.finish_ms = now;
        RequestRecord rec;
        rec.id = r.id;
        rec.adapter_id = r.adapter_id;
        rec.arrival_ms = r.arrival_ms;
        rec.start_ms = r.start_ms;
        rec.finish_ms = r.finish_ms;
        rec.rounds = r.rounds_done;
        rec.e2e_ms = r.finish_ms - r.arrival_ms;
        rec.input_tokens = r.input_len;
        metrics.per_request.push_back(rec);
        if (r.budget_ms && rec.e2e_ms > *r.budget_ms) {
          metrics.budget_violations += 1;
        }
      } else {
        r.state = RequestState::Running;
      }
    }
    std::vector<char> selected(queue.size(), 0);
    for (std::size_t qi : decision.batch) selected[qi] = 1;
    for (std::size_t i = 0; i < queue.size(); ++i) {
      if (queue[i].state == RequestState::Running && !selected[i]) {
        queue[i].state = RequestState::Queued;
      }
    }
  }

  // Clean shutdown: hand the model back with base weights so callers can
  // reuse it. Not part of the serving timeline.
  if (state.mode != InferMode::Unmerged) {
    unmerge(model, state, adapter_at(adapters, state.merged_adapter), table);
  }

  for (const Request& r : queue) {
    if (r.state != RequestState::Done) metrics.unserved += 1;
  }

  double total_e2e = 0.0;
  long long total_tokens = 0;
  double last_finish = first_arrival;
  for (const RequestRecord& rec : metrics.per_request) {
    total_e2e += rec.e2e_ms;
    total_tokens += rec.input_tokens + rec.rounds;
    last_finish = std::max(last_finish, rec.finish_ms);
  }
  metrics.makespan_ms = last_finish - first_arrival;
  if (total_tokens > 0) {
    metrics.avg_token_latency_ms = total_e2e / static_cast<double>(total_tokens);
  }
  if (metrics.makespan_ms > 0) {
    metrics.throughput_rps = static_cast<double>(metrics.per_request.size()) /
                             (metrics.makespan_ms / 1000.0);
  }
  double exec_total = 0.0, per_mode[3] = {0, 0, 0};
  for (const ModeSpan& span : metrics.mode_timeline) {
    exec_total += span.to_ms - span.from_ms;
    per_mode[int(span.mode)] += span.to_ms - span.from_ms;
  }
  if (exec_total > 0) {
    for (int m = 0; m < 3; ++m) {
      metrics.mode_occupancy[m] = per_mode[m] / exec_total;
    }
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// Results files: per-request CSV plus a summary JSON object.
// ---------------------------------------------------------------------------

inline constexpr const char* kResultsHeader =
    "id,adapter,arrival_ms,start_ms,finish_ms,rounds,e2e_ms,input_tokens";

inline void write_request_csv(const Metrics& metrics,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << kResultsHeader << "\n";
  char buf[224];
  for (const RequestRecord& r : metrics.per_request) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.6f,%.6f,%.6f,%d,%.6f,%d",
                  static_cast<long long>(r.id), r.adapter_id, r.arrival_ms,
                  r.start_ms, r.finish_ms, r.rounds, r.e2e_ms, r.input_tokens);
    out << buf << "\n";
  }
}

inline nlohmann::json summary_json(const Metrics& metrics) {
  nlohmann::json j;
  j["avg_token_latency_ms"] = metrics.avg_token_latency_ms;
  j["throughput_rps"] = metrics.throughput_rps;
  j["completed"] = metrics.per_request.size();
  j["switches"] = metrics.switches;
  j["switch_time_ms"] = metrics.switch_time_ms;
  j["mode_occupancy"] = {{"unmerged", metrics.mode_occupancy[0]},
                         {"merged", metrics.mode_occupancy[1]},
                         {"mixture", metrics.mode_occupancy[2]}};
  j["budget_violations"] = metrics.budget_violations;
  j["makespan_ms"] = metrics.makespan_ms;
  j["busy_ms"] = metrics.busy_ms;
  return j;
}

inline void write_summary_json(const Metrics& metrics,
                               const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << summary_json(metrics).dump(2) << "\n";
}

}  // namespace loraserve

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "loraserve/errors.hpp"
#include "loraserve/random.hpp"
#include "loraserve/request.hpp"

namespace loraserve {

/// Positive-integer length distribution: a fixed value or uniform [lo, hi].
struct LenDist {
  int lo = 1;
  int hi = 1;

  static LenDist fixed(int v) { return LenDist{v, v}; }
  static LenDist uniform(int lo, int hi) { return LenDist{lo, hi}; }

  int sample(Rng& rng) const {
    if (lo < 1 || hi < lo) throw ConfigError("length distribution must produce positive integers");
    if (lo == hi) return lo;
    std::uniform_int_distribution<int> d(lo, hi);
    return d(rng);
  }
};

struct AppProfile {
  std::string name;
  LenDist input_len;
  LenDist output_len;
  HeadKind head = HeadKind::Lm;
  std::optional<double> budget_ms;
};

// Token-length profiles for the two reference applications: video analytics
// feeds six 256-token frames and answers through a task head; VQA reads one
// frame's worth of tokens and decodes a long reply.
inline AppProfile video_profile() {
  return AppProfile{"video", LenDist::fixed(6 * 256), LenDist::uniform(5, 10),
                    HeadKind::Task, std::nullopt};
}

inline AppProfile vqa_profile() {
  return AppProfile{"vqa", LenDist::fixed(256), LenDist::uniform(200, 300),
                    HeadKind::Lm, std::nullopt};
}

// Small profile for fast experiments and the test suites.
inline AppProfile micro_profile() {
  return AppProfile{"micro", LenDist::fixed(8), LenDist::uniform(3, 6),
                    HeadKind::Lm, std::nullopt};
}

enum class ArrivalProcess { Poisson, Uniform };

struct WorkloadSpec {
  double duration_ms = 10'000.0;
  double rate_rps = 5.0;
  ArrivalProcess arrival = ArrivalProcess::Poisson;
  int num_adapters = 4;
  double skewness = 0.5;  // share of requests hitting the hottest adapter
  std::vector<std::pair<AppProfile, double>> mix = {{micro_profile(), 1.0}};
  std::uint64_t seed = 1;

  void validate() const {
    if (rate_rps <= 0) throw ConfigError("rate must be > 0");
    if (duration_ms <= 0) throw ConfigError("duration must be > 0");
    if (num_adapters < 1) throw ConfigError("need at least one adapter");
    if (skewness <= 0 || skewness > 1.0) {
      throw ConfigError("skewness must be in (0, 1]");
    }
    if (skewness < 1.0 / num_adapters - 1e-12) {
      throw ConfigError("skewness below 1/num_adapters is not achievable");
    }
    if (num_adapters == 1 && skewness < 1.0) {
      throw ConfigError("single adapter implies skewness 1.0");
    }
    if (mix.empty()) throw ConfigError("profile mix must be nonempty");
    double total = 0;
    for (const auto& [p, w] : mix) {
      if (w < 0) throw ConfigError("profile weights must be >= 0");
      total += w;
    }
    if (total <= 0) throw ConfigError("profile weights must sum > 0");
  }
};

/// Draws a trace: arrivals from the configured process, adapter 0 as the hot
/// adapter with probability = skewness (uniform over the rest otherwise),
/// token lengths from the sampled profile. Pure function of the spec.
inline std::vector<Request> generate(const WorkloadSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Request> trace;

  std::vector<double> arrivals;
  if (spec.arrival == ArrivalProcess::Poisson) {
    std::exponential_distribution<double> gap(spec.rate_rps / 1000.0);
    double t = gap(rng);
    while (t <= spec.duration_ms) {
      arrivals.push_back(t);
      t += gap(rng);
    }
  } else {
    const double period = 1000.0 / spec.rate_rps;
    for (double t = period; t <= spec.duration_ms; t += period) {
      arrivals.push_back(t);
    }
  }

  double mix_total = 0;
  for (const auto& [p, w] : spec.mix) mix_total += w;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::int64_t next_id = 0;
  for (double at : arrivals) {
    Request r;
    r.id = next_id++;
    r.arrival_ms = at;

    if (spec.num_adapters == 1 || unit(rng) < spec.skewness) {
      r.adapter_id = 0;
    } else {
      std::uniform_int_distribution<int> rest(1, spec.num_adapters - 1);
      r.adapter_id = rest(rng);
    }

    double pick = unit(rng) * mix_total;
    const AppProfile* prof = &spec.mix.back().first;
    for (const auto& [p, w] : spec.mix) {
      if (pick < w) {
        prof = &p;
        break;
      }
      pick -= w;
    }
    r.input_len = prof->input_len.sample(rng);
    r.output_len = prof->output_len.sample(rng);
    r.head = prof->head;
    r.budget_ms = prof->budget_ms;
    trace.push_back(r);
  }
  return trace;  // arrivals are generated in increasing order
}

// ---------------------------------------------------------------------------
// Trace file format: CSV with a mandatory header, UTF-8.
//   arrival_ms, request_id, adapter_id, input_tokens, output_tokens,
//   head_kind, budget_ms (empty when absent)
// ---------------------------------------------------------------------------

inline constexpr const char* kTraceHeader =
    "arrival_ms,request_id,adapter_id,input_tokens,output_tokens,head_kind,"
    "budget_ms";

inline void save_trace(const std::vector<Request>& trace,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << kTraceHeader << "\n";
  char buf[160];
  for (const Request& r : trace) {
    std::snprintf(buf, sizeof(buf), "%.6f,%lld,%d,%d,%d,%s,", r.arrival_ms,
                  static_cast<long long>(r.id), r.adapter_id, r.input_len,
                  r.output_len, head_name(r.head));
    out << buf;
    if (r.budget_ms) {
      std::snprintf(buf, sizeof(buf), "%.6f", *r.budget_ms);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("short write: " + path.string());
}

inline std::vector<Request> load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for read: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw IoError("empty trace: " + path.string());
  ++lineno;
  if (line != kTraceHeader) throw ParseError("bad trace header", lineno);

  std::vector<Request> trace;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (ss.eof() && !line.empty() && line.back() == ',') cells.push_back("");
    if (cells.size() != 7) {
      throw ParseError("expected 7 columns, got " + std::to_string(cells.size()),
                       lineno);
    }
    Request r;
    try {
      r.arrival_ms = std::stod(cells[0]);
      r.id = std::stoll(cells[1]);
      r.adapter_id = std::stoi(cells[2]);
      r.input_len = std::stoi(cells[3]);
      r.output_len = std::stoi(cells[4]);
    } catch (const std::exception&) {
      throw ParseError("bad numeric field", lineno);
    }
    r.head = head_from_name(cells[5], lineno);
    if (!cells[6].empty()) {
      try {
        r.budget_ms = std::stod(cells[6]);
      } catch (const std::exception&) {
        throw ParseError("bad budget field", lineno);
      }
    }
    if (r.input_len < 1 || r.output_len < 1) {
      throw ParseError("token lengths must be positive", lineno);
    }
    trace.push_back(r);
  }
  std::stable_sort(trace.begin(), trace.end(),
                   [](const Request& a, const Request& b) {
                     return a.arrival_ms < b.arrival_ms;
                   });
  return trace;
}

}  // namespace loraserve

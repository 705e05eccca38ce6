// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "loraserve/atmm.hpp"
#include "loraserve/model.hpp"
#include "loraserve/scheduler.hpp"
#include "loraserve/serving.hpp"

namespace loraserve {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  bool quick = false;
  std::uint64_t seed = 42;
  // Test hook: perturbs merged weights so the mode-equivalence check must
  // fail, proving the verifier can catch a bad kernel or switcher.
  std::string inject_fault;
};

namespace detail {

inline double rel_tol(double max_entry) { return 1e-4 * std::max(1.0, max_entry); }

inline CheckResult check_atmm_oracle(const VerifyOptions& opt) {
  CheckResult r{"atmm_oracle", true, ""};
  Rng rng(opt.seed);
  const int cases = opt.quick ? 8 : 24;
  std::uniform_int_distribution<std::size_t> dim(1, opt.quick ? 160 : 320);
  const auto candidates = default_candidates(1 << 20, sizeof(float));
  double worst = 0.0;
  for (int c = 0; c < cases && r.pass; ++c) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Matrix<float> a = random_matrix<float>(m, k, rng);
    Matrix<float> b = random_matrix<float>(k, n, rng);
    Matrix<float> ref = gemm_reference<float>(a, b);
    const TilingConfig cfg = candidates[c % candidates.size()];
    Matrix<float> got = atmm_multiply<float>(a, b, cfg);
    const double diff = max_abs_diff<float>(got, ref);
    const double tol = rel_tol(max_abs<float>(ref));
    worst = std::max(worst, diff / tol);
    if (diff > tol) {
      r.pass = false;
      r.detail = "shape " + std::to_string(m) + "x" + std::to_string(k) + "x" +
                 std::to_string(n) + " config " + cfg.to_string() + " diff " +
                 std::to_string(diff) + " > tol " + std::to_string(tol);
    }
  }
  if (r.pass) r.detail = "worst diff/tol = " + std::to_string(worst);
  return r;
}

inline CheckResult check_mode_equivalence(const VerifyOptions& opt) {
  CheckResult r{"mode_equivalence", true, ""};
  const std::size_t L = 3, d = opt.quick ? 64 : 128, V = 64, rank = 16;
  const int instances = opt.quick ? 3 : 8;
  TilingTable table;
  for (int inst = 0; inst < instances && r.pass; ++inst) {
    const std::uint64_t seed = opt.seed + inst;
    BaseModel model = BaseModel::random(L, d, V, seed);
    AdapterSet adapters;
    adapters.emplace(1, LoraAdapter::random(1, L, d, rank, seed * 31 + 1));
    adapters.emplace(2, LoraAdapter::random(2, L, d, rank, seed * 31 + 2));
    Rng rng(seed ^ 0xabcd);
    Matrix<float> x = random_matrix<float>(6, d, rng);
    std::vector<int> assignment = {1, 2, 1, 2, 2, 1};

    ModelState state;
    Matrix<float> unmerged =
        forward_unmerged(model, state, x, assignment, adapters, table);

    merge(model, state, adapter_at(adapters, 1), table);
    if (opt.inject_fault == "mode_equivalence") {
      model.layer(0).data[0] += 0.5f;  // constructed fault
    }
    Matrix<float> merged_rows = forward_merged(model, state, x, table);
    init_delora(state, adapter_at(adapters, 1));
    state.mode = InferMode::Mixture;
    Matrix<float> mixture =
        forward_mixture(model, state, x, assignment, adapters, table);

    const double tol = rel_tol(max_abs<float>(unmerged));
    for (std::size_t row = 0; row < x.rows(); ++row) {
      ConstMatSpan<float> mix_row(mixture.data() + row * d, 1, d);
      ConstMatSpan<float> unm_row(unmerged.data() + row * d, 1, d);
      ConstMatSpan<float> mer_row(merged_rows.data() + row * d, 1, d);
      const double diff = assignment[row] == 1
                              ? max_abs_diff<float>(mix_row, mer_row)
                              : max_abs_diff<float>(mix_row, unm_row);
      if (diff > tol) {
        r.pass = false;
        r.detail = "instance " + std::to_string(inst) + " row " +
                   std::to_string(row) + " diff " + std::to_string(diff) +
                   " > tol " + std::to_string(tol);
        break;
      }
    }
    // Cross-mode agreement for the merged adapter's own rows.
    if (r.pass) {
      for (std::size_t row = 0; row < x.rows() && r.pass; ++row) {
        if (assignment[row] != 1) continue;
        ConstMatSpan<float> mer_row(merged_rows.data() + row * d, 1, d);
        ConstMatSpan<float> unm_row(unmerged.data() + row * d, 1, d);
        const double diff = max_abs_diff<float>(mer_row, unm_row);
        if (diff > tol) {
          r.pass = false;
          r.detail = "merged/unmerged mismatch at row " + std::to_string(row) +
                     " diff " + std::to_string(diff);
        }
      }
    }
  }
  if (r.pass) r.detail = std::to_string(instances) + " instances within tolerance";
  return r;
}

inline CheckResult check_round_trip(const VerifyOptions& opt) {
  CheckResult r{"merge_round_trip", true, ""};
  const std::size_t L = 2, d = 64, V = 32, rank = 8;
  const int cycles = opt.quick ? 20 : 100;
  TilingTable table;
  BaseModel model = BaseModel::random(L, d, V, opt.seed);
  AdapterSet adapters;
  adapters.emplace(1, LoraAdapter::random(1, L, d, rank, opt.seed + 99));
  std::vector<Matrix<float>> checkpoint;
  std::vector<const float*> addresses;
  for (std::size_t l = 0; l < L; ++l) {
    Matrix<float> copy(d, d);
    ConstMatSpan<float> w = model.layer(l);
    std::copy(w.data, w.data + d * d, copy.data());
    checkpoint.push_back(std::move(copy));
    addresses.push_back(model.layer(l).data);
  }
  ModelState state;
  const LoraAdapter& adapter = adapter_at(adapters, 1);
  for (int c = 0; c < cycles; ++c) {
    merge(model, state, adapter, table);
    unmerge(model, state, adapter, table);
  }
  double drift = 0.0, scale = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    drift = std::max(drift, max_abs_diff<float>(model.layer(l), checkpoint[l]));
    scale = std::max(scale, max_abs<float>(checkpoint[l]));
    if (model.layer(l).data != addresses[l]) {
      r.pass = false;
      r.detail = "layer storage reallocated";
      return r;
    }
  }
  const double tol = 1e-4 * std::max(1.0, scale);
  if (drift > tol) {
    r.pass = false;
    r.detail = "drift " + std::to_string(drift) + " > " + std::to_string(tol);
  } else {
    r.detail = std::to_string(cycles) + " cycles, drift " + std::to_string(drift);
  }
  return r;
}

inline CheckResult check_scheduler_traces(const VerifyOptions&) {
  CheckResult r{"scheduler_traces", true, ""};
  SchedulerConfig config{8, 100.0};
  auto mk = [](std::int64_t id, int adapter, double credit) {
    Request q;
    q.id = id;
    q.adapter_id = adapter;
    q.arrival_ms = double(id);
    q.credit_ms = credit;
    return q;
  };

  {  // merged branch: six of L1, two of L2, nobody starving
    std::vector<Request> queue;
    for (int i = 0; i < 6; ++i) queue.push_back(mk(i, 1, 0.0));
    queue.push_back(mk(6, 2, 0.0));
    queue.push_back(mk(7, 2, 0.0));
    auto d = schedule(queue, InferMode::Unmerged, -1, config);
    if (d.mode != InferMode::Merged || d.target_adapter != 1 ||
        d.batch != std::vector<std::size_t>{0, 1, 2, 3, 4, 5}) {
      r.pass = false;
      r.detail = "merged-branch trace mismatch";
    }
  }
  if (r.pass) {  // mixture branch: two starving L2, five L1
    std::vector<Request> queue;
    queue.push_back(mk(0, 2, 200.0));
    queue.push_back(mk(1, 2, 200.0));
    for (int i = 2; i < 7; ++i) queue.push_back(mk(i, 1, 0.0));
    auto d = schedule(queue, InferMode::Unmerged, -1, config);
    if (d.mode != InferMode::Mixture || d.target_adapter != 1 ||
        d.batch != std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}) {
      r.pass = false;
      r.detail = "mixture-branch trace mismatch";
    }
  }
  if (r.pass) {  // unmerged branch: five starving across adapters
    std::vector<Request> queue;
    for (int i = 0; i < 5; ++i) queue.push_back(mk(i, i % 3, 200.0));
    for (int i = 5; i < 9; ++i) queue.push_back(mk(i, i % 3, 0.0));
    auto d = schedule(queue, InferMode::Merged, 0, config);
    if (d.mode != InferMode::Unmerged ||
        d.batch != std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}) {
      r.pass = false;
      r.detail = "unmerged-branch trace mismatch";
    }
  }
  if (r.pass) r.detail = "all three policy branches match the hand traces";
  return r;
}

}  // namespace detail

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt) {
  std::vector<CheckResult> results;
  results.push_back(detail::check_atmm_oracle(opt));
  results.push_back(detail::check_mode_equivalence(opt));
  results.push_back(detail::check_round_trip(opt));
  results.push_back(detail::check_scheduler_traces(opt));
  return results;
}

inline nlohmann::json verification_json(const std::vector<CheckResult>& results) {
  nlohmann::json j = nlohmann::json::array();
  for (const CheckResult& r : results) {
    j.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
  }
  return j;
}

}  // namespace loraserve

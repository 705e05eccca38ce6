// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loraserve/errors.hpp"
#include "loraserve/random.hpp"

namespace loraserve {

/// One domain dataset to pack: the task it serves, the accuracy floor that
/// task demands, and optionally a task type making it eligible for a shared
/// task head.
struct KnowledgeSource {
  std::string id;
  std::string task_id;
  double requirement = 0.0;  // in [0, 1]
  std::optional<std::string> task_type;
};

/// Oracle-visible training state. Value semantics: a checkpoint is a plain
/// copy, and rollback restores it bit for bit.
struct AdapterTrainState {
  std::vector<std::string> fused;  // source ids in training order
  std::vector<float> weights;     // used by trainer-backed oracles
};

/// Stand-in for the fine-tuning pipeline: train folds one source into the
/// state, eval scores a task. Both are deterministic given their inputs.
class AccuracyOracle {
 public:
  virtual ~AccuracyOracle() = default;
  virtual AdapterTrainState train(const AdapterTrainState& state,
                                  const KnowledgeSource& source) const = 0;
  virtual double eval(const AdapterTrainState& state,
                      const std::string& task_id) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic oracles.
// ---------------------------------------------------------------------------

/// Capacity-decay model: accuracy on every fused task is a monotone
/// function of how many sources share the adapter, acc = base - slope * k,
/// with optional per-task-type slopes (steeper types pack less densely).
class DecayOracle : public AccuracyOracle {
 public:
  DecayOracle(double base, double slope,
              std::map<std::string, double> per_type_slope = {},
              const std::vector<KnowledgeSource>& sources = {})
      : base_(base), slope_(slope), per_type_slope_(std::move(per_type_slope)) {
    for (const KnowledgeSource& s : sources) {
      if (s.task_type) type_slope_of_task_[s.task_id] = s.task_type.value();
    }
  }

  AdapterTrainState train(const AdapterTrainState& state,
                          const KnowledgeSource& source) const override {
    AdapterTrainState next = state;
    next.fused.push_back(source.id);
    return next;
  }

  double eval(const AdapterTrainState& state,
              const std::string& task_id) const override {
    double slope = slope_;
    if (auto ty = type_slope_of_task_.find(task_id);
        ty != type_slope_of_task_.end()) {
      if (auto s = per_type_slope_.find(ty->second); s != per_type_slope_.end()) {
        slope = s->second;
      }
    }
    const double acc = base_ - slope * static_cast<double>(state.fused.size());
    return std::clamp(acc, 0.0, 1.0);
  }

 private:
  double base_;
  double slope_;
  std::map<std::string, double> per_type_slope_;
  std::map<std::string, std::string> type_slope_of_task_;
};

/// Pairwise-interference model: each source starts at its base accuracy and
/// loses a table-driven penalty for every other source sharing the adapter.
class InterferenceOracle : public AccuracyOracle {
 public:
  InterferenceOracle(std::map<std::string, double> base,
                     std::map<std::string, std::string> task_of,
                     std::map<std::pair<std::string, std::string>, double> pair_penalty)
      : base_(std::move(base)),
        task_of_(std::move(task_of)),
        pair_penalty_(std::move(pair_penalty)) {}

  /// Randomized instance: per-source base in [lo_base, 1], symmetric pair
  /// penalties in [0, max_penalty]. Deterministic under the seed.
  static InterferenceOracle random(const std::vector<KnowledgeSource>& sources,
                                   std::uint64_t seed, double lo_base = 0.9,
                                   double max_penalty = 0.05) {
    Rng rng(seed);
    std::uniform_real_distribution<double> base_dist(lo_base, 1.0);
    std::uniform_real_distribution<double> pen_dist(0.0, max_penalty);
    std::map<std::string, double> base;
    std::map<std::string, std::string> task_of;
    for (const auto& s : sources) {
      base[s.id] = base_dist(rng);
      task_of[s.id] = s.task_id;
    }
    std::map<std::pair<std::string, std::string>, double> pen;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      for (std::size_t j = i + 1; j < sources.size(); ++j) {
        const double p = pen_dist(rng);
        pen[{sources[i].id, sources[j].id}] = p;
        pen[{sources[j].id, sources[i].id}] = p;
      }
    }
    return InterferenceOracle(std::move(base), std::move(task_of), std::move(pen));
  }

  AdapterTrainState train(const AdapterTrainState& state,
                          const KnowledgeSource& source) const override {
    AdapterTrainState next = state;
    next.fused.push_back(source.id);
    return next;
  }

  double eval(const AdapterTrainState& state,
              const std::string& task_id) const override {
    double acc = 1.0;
    for (const std::string& sid : state.fused) {
      auto t = task_of_.find(sid);
      if (t == task_of_.end() || t->second != task_id) continue;
      auto b = base_.find(sid);
      acc = b != base_.end() ? b->second : 1.0;
      for (const std::string& other : state.fused) {
        if (other == sid) continue;
        auto p = pair_penalty_.find({sid, other});
        if (p != pair_penalty_.end()) acc -= p->second;
      }
      break;
    }
    return std::clamp(acc, 0.0, 1.0);
  }

 private:
  std::map<std::string, double> base_;
  std::map<std::string, std::string> task_of_;
  std::map<std::pair<std::string, std::string>, double> pair_penalty_;
};

/// Builds an oracle from a JSON-compatible spec:
///   {"kind": "decay", "base": 1.0, "slope": 0.05,
///    "type_slopes": {"image": 0.02, "video": 0.10}}        (optional)
///   {"kind": "interference", "seed": 7, "lo_base": 0.9,
///    "max_penalty": 0.05}
inline std::unique_ptr<AccuracyOracle> synthetic_oracle(
    const nlohmann::json& spec, const std::vector<KnowledgeSource>& sources) {
  if (!spec.contains("kind")) throw ConfigError("oracle spec needs a 'kind'");
  const std::string kind = spec.at("kind");
  if (kind == "decay") {
    const double base = spec.value("base", 1.0);
    const double slope = spec.value("slope", 0.05);
    std::map<std::string, double> type_slopes;
    if (spec.contains("type_slopes")) {
      for (const auto& [k, v] : spec.at("type_slopes").items()) {
        type_slopes[k] = v;
      }
    }
    return std::make_unique<DecayOracle>(base, slope, std::move(type_slopes),
                                         sources);
  }
  if (kind == "interference") {
    return std::make_unique<InterferenceOracle>(InterferenceOracle::random(
        sources, spec.value("seed", std::uint64_t(1)),
        spec.value("lo_base", 0.9), spec.value("max_penalty", 0.05)));
  }
  throw ConfigError("unknown oracle kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// The greedy planner.
// ---------------------------------------------------------------------------

struct PlanAdapter {
  std::vector<std::string> source_ids;
  std::map<std::string, double> task_accuracy;  // final accuracy per task
  bool has_task_head = false;
  std::optional<std::string> task_type;
};

/// Assignment of sources to adapters; the sets partition the input and every
/// recorded accuracy clears its task's requirement.
struct FusionPlan {
  std::vector<PlanAdapter> adapters;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["adapters"] = nlohmann::json::array();
    for (const PlanAdapter& a : adapters) {
      nlohmann::json e;
      e["sources"] = a.source_ids;
      e["task_accuracy"] = a.task_accuracy;
      e["task_head"] = a.has_task_head;
      if (a.task_type) e["task_type"] = *a.task_type;
      j["adapters"].push_back(e);
    }
    return j;
  }

  static FusionPlan from_json(const nlohmann::json& j) {
    FusionPlan plan;
    for (const auto& e : j.at("adapters")) {
      PlanAdapter a;
      for (const auto& s : e.at("sources")) a.source_ids.push_back(s);
      for (const auto& [k, v] : e.at("task_accuracy").items()) {
        a.task_accuracy[k] = v;
      }
      a.has_task_head = e.value("task_head", false);
      if (e.contains("task_type")) a.task_type = e.at("task_type");
      plan.adapters.push_back(std::move(a));
    }
    return plan;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path.string());
    out << to_json().dump(2) << "\n";
  }
};

namespace detail {

struct OpenAdapter {
  AdapterTrainState state;
  std::vector<const KnowledgeSource*> members;
};

inline const KnowledgeSource* violating_member(const OpenAdapter& adapter,
                                               const AccuracyOracle& oracle) {
  for (const KnowledgeSource* m : adapter.members) {
    if (oracle.eval(adapter.state, m->task_id) < m->requirement) return m;
  }
  return nullptr;
}

inline PlanAdapter close_adapter(const OpenAdapter& adapter,
                                 const AccuracyOracle& oracle) {
  PlanAdapter out;
  bool head_ok = !adapter.members.empty();
  std::optional<std::string> shared_type;
  for (const KnowledgeSource* m : adapter.members) {
    out.source_ids.push_back(m->id);
    out.task_accuracy[m->task_id] = oracle.eval(adapter.state, m->task_id);
    if (!m->task_type) {
      head_ok = false;
    } else if (!shared_type) {
      shared_type = m->task_type;
    } else if (*shared_type != *m->task_type) {
      head_ok = false;
    }
  }
  // A task head is attached only when every fused source shares a task type.
  out.has_task_head = head_ok && shared_type.has_value();
  if (out.has_task_head) out.task_type = shared_type;
  return out;
}

}  // namespace detail

/// Greedy accuracy-aware packing. Sources are visited in a seeded-random
/// order; each one is trained into the open adapter, then every task fused
/// so far is re-evaluated. Any violation rolls the adapter back to the
/// stored checkpoint (a copy, never an arithmetic undo), closes it, and
/// starts a fresh adapter on the violating source. A source that cannot
/// clear its own requirement alone is a hard error.
inline FusionPlan fuse(const std::vector<KnowledgeSource>& sources,
                       const AccuracyOracle& oracle, std::uint64_t seed) {
  if (sources.empty()) throw ConfigError("fuse needs at least one source");

  std::vector<const KnowledgeSource*> order;
  for (const KnowledgeSource& s : sources) {
    if (s.requirement < 0.0 || s.requirement > 1.0) {
      throw ConfigError("requirement for source '" + s.id +
                        "' must be in [0, 1]");
    }
    order.push_back(&s);
  }
  Rng rng(seed);
  seeded_shuffle(order, rng);

  FusionPlan plan;
  detail::OpenAdapter current;

  auto open_fresh = [&](const KnowledgeSource* src) {
    detail::OpenAdapter fresh;
    fresh.state = oracle.train(AdapterTrainState{}, *src);
    fresh.members = {src};
    const double acc = oracle.eval(fresh.state, src->task_id);
    if (acc < src->requirement) {
      throw UnsatisfiableSourceError(src->id, acc, src->requirement);
    }
    return fresh;
  };

  for (const KnowledgeSource* src : order) {
    if (current.members.empty()) {
      current = open_fresh(src);
      continue;
    }
    const AdapterTrainState checkpoint = current.state;
    current.state = oracle.train(current.state, *src);
    current.members.push_back(src);
    if (detail::violating_member(current, oracle) != nullptr) {
      current.state = checkpoint;  // exact restore
      current.members.pop_back();
      plan.adapters.push_back(detail::close_adapter(current, oracle));
      current = open_fresh(src);
    }
  }
  if (!current.members.empty()) {
    plan.adapters.push_back(detail::close_adapter(current, oracle));
  }
  return plan;
}

struct PlanViolation {
  std::size_t adapter_index = 0;
  std::string task_id;
  double accuracy = 0.0;
  double requirement = 0.0;
};

struct ValidationReport {
  std::vector<PlanViolation> violations;
  bool ok() const { return violations.empty(); }
};

/// Re-trains each adapter on its source set in plan order and re-evaluates
/// every member's task against its requirement. The report carries any
/// violation; a plan produced by fuse() yields none.
inline ValidationReport validate_plan(const FusionPlan& plan,
                                      const std::vector<KnowledgeSource>& sources,
                                      const AccuracyOracle& oracle) {
  std::map<std::string, const KnowledgeSource*> by_id;
  for (const KnowledgeSource& s : sources) by_id[s.id] = &s;

  ValidationReport report;
  for (std::size_t ai = 0; ai < plan.adapters.size(); ++ai) {
    AdapterTrainState state;
    std::vector<const KnowledgeSource*> members;
    for (const std::string& sid : plan.adapters[ai].source_ids) {
      auto it = by_id.find(sid);
      if (it == by_id.end()) {
        report.violations.push_back(
            PlanViolation{ai, "unknown source " + sid, 0.0, 1.0});
        continue;
      }
      state = oracle.train(state, *it->second);
      members.push_back(it->second);
    }
    for (const KnowledgeSource* m : members) {
      const double acc = oracle.eval(state, m->task_id);
      if (acc < m->requirement) {
        report.violations.push_back(
            PlanViolation{ai, m->task_id, acc, m->requirement});
      }
    }
  }
  return report;
}

/// Sources-spec file for the fuse command:
///   {"sources": [{"id": ..., "task": ..., "requirement": ...,
///                 "task_type": ...?}, ...],
///    "oracle": {...}}
inline std::vector<KnowledgeSource> load_sources_spec(
    const nlohmann::json& j) {
  std::vector<KnowledgeSource> sources;
  for (const auto& e : j.at("sources")) {
    KnowledgeSource s;
    s.id = e.at("id");
    s.task_id = e.at("task");
    s.requirement = e.at("requirement");
    if (e.contains("task_type")) s.task_type = e.at("task_type");
    sources.push_back(std::move(s));
  }
  if (sources.empty()) throw ConfigError("sources spec lists no sources");
  return sources;
}

}  // namespace loraserve

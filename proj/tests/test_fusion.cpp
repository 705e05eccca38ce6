// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <set>

#include "loraserve/fusion.hpp"

using namespace loraserve;

namespace {

std::vector<KnowledgeSource> uniform_sources(int n, double requirement,
                                             const std::string& type = "") {
  std::vector<KnowledgeSource> out;
  for (int i = 0; i < n; ++i) {
    KnowledgeSource s;
    s.id = "src" + std::to_string(i);
    s.task_id = "task" + std::to_string(i);
    s.requirement = requirement;
    if (!type.empty()) s.task_type = type;
    out.push_back(std::move(s));
  }
  return out;
}

// Independent re-implementation of the greedy run for trace-equivalence
// checks: mirrors the planner's contract without sharing its code path.
std::vector<std::vector<std::string>> greedy_reference(
    std::vector<KnowledgeSource> sources, const AccuracyOracle& oracle,
    std::uint64_t seed) {
  std::vector<const KnowledgeSource*> order;
  for (const auto& s : sources) order.push_back(&s);
  Rng rng(seed);
  seeded_shuffle(order, rng);

  std::vector<std::vector<std::string>> bins;
  AdapterTrainState state;
  std::vector<const KnowledgeSource*> members;
  for (const KnowledgeSource* src : order) {
    AdapterTrainState trial = oracle.train(state, *src);
    bool ok = true;
    for (const KnowledgeSource* m : members) {
      if (oracle.eval(trial, m->task_id) < m->requirement) ok = false;
    }
    if (oracle.eval(trial, src->task_id) < src->requirement) ok = false;
    if (members.empty() || ok) {
      state = trial;
      members.push_back(src);
      continue;
    }
    std::vector<std::string> bin;
    for (const KnowledgeSource* m : members) bin.push_back(m->id);
    bins.push_back(bin);
    state = oracle.train(AdapterTrainState{}, *src);
    members = {src};
  }
  if (!members.empty()) {
    std::vector<std::string> bin;
    for (const KnowledgeSource* m : members) bin.push_back(m->id);
    bins.push_back(bin);
  }
  return bins;
}

}  // namespace

TEST_CASE("single satisfiable source gives a one-adapter plan") {
  auto sources = uniform_sources(1, 0.9);
  DecayOracle oracle(1.0, 0.05);
  FusionPlan plan = fuse(sources, oracle, 3);
  REQUIRE(plan.adapters.size() == 1);
  CHECK(plan.adapters[0].source_ids == std::vector<std::string>{"src0"});
  CHECK(plan.adapters[0].task_accuracy.at("task0") == Catch::Approx(0.95));
}

TEST_CASE("closed-form decay case packs pairs") {
  // acc(k) = 1 - 0.05k against a 0.87 floor: two sources hold (0.90), three
  // break (0.85), so the plan has ceil(N/2) adapters.
  for (int n : {2, 4, 6, 7}) {
    auto sources = uniform_sources(n, 0.87);
    DecayOracle oracle(1.0, 0.05);
    FusionPlan plan = fuse(sources, oracle, 11);
    CHECK(plan.adapters.size() == std::size_t((n + 1) / 2));
    std::set<std::string> seen;
    for (const auto& a : plan.adapters) {
      CHECK(a.source_ids.size() <= 2);
      for (const auto& id : a.source_ids) CHECK(seen.insert(id).second);
    }
    CHECK(seen.size() == std::size_t(n));  // partition covers every source
  }
}

TEST_CASE("zero slope folds everything into one adapter") {
  auto sources = uniform_sources(9, 0.8);
  DecayOracle oracle(0.9, 0.0);
  FusionPlan plan = fuse(sources, oracle, 21);
  REQUIRE(plan.adapters.size() == 1);
  CHECK(plan.adapters[0].source_ids.size() == 9);
}

TEST_CASE("steep slope degenerates to one adapter per source") {
  // Any pairing violates: acc(1) = 0.9 holds, acc(2) = 0.8 < 0.87.
  auto sources = uniform_sources(5, 0.87);
  DecayOracle oracle(1.0, 0.1);
  FusionPlan plan = fuse(sources, oracle, 5);
  CHECK(plan.adapters.size() == 5);
  for (const auto& a : plan.adapters) CHECK(a.source_ids.size() == 1);
}

TEST_CASE("unsatisfiable source raises and names the source") {
  auto sources = uniform_sources(3, 0.99);
  DecayOracle oracle(1.0, 0.05);  // alone: 0.95 < 0.99
  try {
    fuse(sources, oracle, 1);
    FAIL("expected UnsatisfiableSourceError");
  } catch (const UnsatisfiableSourceError& e) {
    CHECK(std::string(e.what()).find("src") != std::string::npos);
    CHECK(!e.source_id().empty());
  }
}

TEST_CASE("six-source rollback scenario") {
  // Thresholds mirror the worked example: the fourth source in training
  // order knocks earlier tasks below their floors, so the run rolls back,
  // closes adapter 1 with three sources, and packs the rest into adapter 2.
  auto sources = uniform_sources(6, 0.85);
  DecayOracle oracle(1.0, 0.049);  // k=3: 0.853 ok, k=4: 0.804 violates
  FusionPlan plan = fuse(sources, oracle, 2);
  REQUIRE(plan.adapters.size() == 2);
  CHECK(plan.adapters[0].source_ids.size() == 3);
  CHECK(plan.adapters[1].source_ids.size() == 3);
  for (const auto& a : plan.adapters) {
    for (const auto& [task, acc] : a.task_accuracy) CHECK(acc >= 0.85);
  }
}

TEST_CASE("plans are deterministic under the seed and shuffled across seeds") {
  auto sources = uniform_sources(8, 0.87);
  DecayOracle oracle(1.0, 0.05);
  FusionPlan p1 = fuse(sources, oracle, 123);
  FusionPlan p2 = fuse(sources, oracle, 123);
  REQUIRE(p1.adapters.size() == p2.adapters.size());
  for (std::size_t i = 0; i < p1.adapters.size(); ++i) {
    CHECK(p1.adapters[i].source_ids == p2.adapters[i].source_ids);
  }
}

TEST_CASE("greedy trace equivalence with an independent re-implementation") {
  auto sources = uniform_sources(10, 0.86);
  for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
    DecayOracle oracle(1.0, 0.04);
    FusionPlan plan = fuse(sources, oracle, seed);
    auto reference = greedy_reference(sources, oracle, seed);
    REQUIRE(plan.adapters.size() == reference.size());
    for (std::size_t i = 0; i < reference.size(); ++i) {
      CHECK(plan.adapters[i].source_ids == reference[i]);
    }
  }
}

TEST_CASE("per-type slopes pack shallow types denser") {
  std::vector<KnowledgeSource> sources;
  for (int i = 0; i < 6; ++i) {
    KnowledgeSource s;
    s.id = "img" + std::to_string(i);
    s.task_id = "imgtask" + std::to_string(i);
    s.requirement = 0.85;
    s.task_type = "image";
    sources.push_back(s);
  }
  for (int i = 0; i < 6; ++i) {
    KnowledgeSource s;
    s.id = "vid" + std::to_string(i);
    s.task_id = "vidtask" + std::to_string(i);
    s.requirement = 0.85;
    s.task_type = "video";
    sources.push_back(s);
  }
  DecayOracle oracle(1.0, 0.05, {{"image", 0.01}, {"video", 0.12}}, sources);

  // Mixed-type adapters adopt the steeper member's fate per task, so use
  // type-pure source visits: fuse each family separately and compare pack
  // density.
  std::vector<KnowledgeSource> imgs(sources.begin(), sources.begin() + 6);
  std::vector<KnowledgeSource> vids(sources.begin() + 6, sources.end());
  FusionPlan img_plan = fuse(imgs, DecayOracle(1.0, 0.01, {}, imgs), 5);
  FusionPlan vid_plan = fuse(vids, DecayOracle(1.0, 0.12, {}, vids), 5);
  CHECK(img_plan.adapters.size() < vid_plan.adapters.size());

  double img_density = 6.0 / double(img_plan.adapters.size());
  double vid_density = 6.0 / double(vid_plan.adapters.size());
  CHECK(img_density > vid_density);
}

TEST_CASE("validate_plan re-trains and catches corruption") {
  auto sources = uniform_sources(6, 0.87);
  DecayOracle oracle(1.0, 0.05);
  FusionPlan plan = fuse(sources, oracle, 17);
  CHECK(validate_plan(plan, sources, oracle).ok());

  // Empty plan: empty report.
  CHECK(validate_plan(FusionPlan{}, sources, oracle).ok());

  // Move one source into another adapter: the decay oracle must object.
  REQUIRE(plan.adapters.size() >= 2);
  plan.adapters[0].source_ids.push_back(plan.adapters[1].source_ids.back());
  plan.adapters[1].source_ids.pop_back();
  ValidationReport report = validate_plan(plan, sources, oracle);
  CHECK(!report.ok());
  CHECK(report.violations.front().accuracy < 0.87);
}

TEST_CASE("rollback restores the checkpoint bit for bit") {
  // Trainer-style oracle with float weights: rollback equality must hold on
  // the raw bytes, not within a tolerance.
  class WeightOracle : public AccuracyOracle {
   public:
    AdapterTrainState train(const AdapterTrainState& state,
                            const KnowledgeSource& source) const override {
      AdapterTrainState next = state;
      next.fused.push_back(source.id);
      Rng rng(std::hash<std::string>{}(source.id));
      for (int i = 0; i < 16; ++i) {
        next.weights.push_back(float(rng() % 1000) * 0.001f);
      }
      return next;
    }
    double eval(const AdapterTrainState& state,
                const std::string&) const override {
      return state.fused.size() <= 2 ? 0.95 : 0.5;
    }
  };

  WeightOracle oracle;
  KnowledgeSource a{"a", "ta", 0.9, {}};
  AdapterTrainState s0;
  AdapterTrainState s1 = oracle.train(s0, a);
  AdapterTrainState checkpoint = s1;
  KnowledgeSource b{"b", "tb", 0.9, {}};
  AdapterTrainState s2 = oracle.train(s1, b);
  s2 = checkpoint;  // rollback by copy
  REQUIRE(s2.weights.size() == s1.weights.size());
  CHECK(std::memcmp(s2.weights.data(), s1.weights.data(),
                    s1.weights.size() * sizeof(float)) == 0);
  CHECK(s2.fused == s1.fused);

  // And the planner path: a 3-source run with this oracle rolls back once.
  std::vector<KnowledgeSource> sources = {a, b, {"c", "tc", 0.9, {}}};
  FusionPlan plan = fuse(sources, oracle, 4);
  CHECK(plan.adapters.size() == 2);
}

TEST_CASE("worst-case bound: never more adapters than sources") {
  for (std::uint64_t seed : {2ull, 3ull, 4ull}) {
    auto sources = uniform_sources(7, 0.8);
    auto oracle = InterferenceOracle::random(sources, seed, 0.9, 0.15);
    FusionPlan plan = fuse(sources, oracle, seed);
    CHECK(plan.adapters.size() <= 7);
    CHECK(validate_plan(plan, sources, oracle).ok());
  }
}

TEST_CASE("task heads attach only to type-pure adapters") {
  std::vector<KnowledgeSource> sources;
  KnowledgeSource s1{"a", "t1", 0.5, "detect"};
  KnowledgeSource s2{"b", "t2", 0.5, "detect"};
  KnowledgeSource s3{"c", "t3", 0.5, "classify"};
  sources = {s1, s2, s3};
  DecayOracle shallow(1.0, 0.0);
  FusionPlan plan = fuse(sources, shallow, 8);
  REQUIRE(plan.adapters.size() == 1);
  CHECK_FALSE(plan.adapters[0].has_task_head);  // mixed types

  std::vector<KnowledgeSource> pure = {s1, s2};
  FusionPlan plan2 = fuse(pure, shallow, 8);
  REQUIRE(plan2.adapters.size() == 1);
  CHECK(plan2.adapters[0].has_task_head);
  CHECK(plan2.adapters[0].task_type == "detect");
}

TEST_CASE("plan json round trip") {
  auto sources = uniform_sources(4, 0.87, "detect");
  DecayOracle oracle(1.0, 0.05);
  FusionPlan plan = fuse(sources, oracle, 6);
  FusionPlan back = FusionPlan::from_json(plan.to_json());
  REQUIRE(back.adapters.size() == plan.adapters.size());
  for (std::size_t i = 0; i < plan.adapters.size(); ++i) {
    CHECK(back.adapters[i].source_ids == plan.adapters[i].source_ids);
    CHECK(back.adapters[i].has_task_head == plan.adapters[i].has_task_head);
  }
}

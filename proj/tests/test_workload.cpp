// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "loraserve/workload.hpp"

using namespace loraserve;

namespace {

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generation is deterministic and sorted") {
  WorkloadSpec spec;
  spec.duration_ms = 4000;
  spec.rate_rps = 50;
  spec.num_adapters = 4;
  spec.skewness = 0.5;
  spec.seed = 9;

  auto t1 = generate(spec);
  auto t2 = generate(spec);
  REQUIRE(!t1.empty());
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].arrival_ms == t2[i].arrival_ms);
    CHECK(t1[i].adapter_id == t2[i].adapter_id);
    CHECK(t1[i].input_len == t2[i].input_len);
  }
  for (std::size_t i = 1; i < t1.size(); ++i) {
    CHECK(t1[i].arrival_ms >= t1[i - 1].arrival_ms);
  }
}

TEST_CASE("skew controls the hot adapter share") {
  WorkloadSpec spec;
  spec.duration_ms = 100'000;
  spec.rate_rps = 100;  // ~10k requests
  spec.num_adapters = 10;
  spec.skewness = 0.9;
  spec.seed = 4;

  auto trace = generate(spec);
  REQUIRE(trace.size() > 5000);
  std::size_t hot = 0;
  for (const Request& r : trace) {
    if (r.adapter_id == 0) ++hot;
  }
  const double share = double(hot) / double(trace.size());
  CHECK(share >= 0.88);
  CHECK(share <= 0.92);
}

TEST_CASE("degenerate skew gives uniform adapter frequencies") {
  WorkloadSpec spec;
  spec.duration_ms = 100'000;
  spec.rate_rps = 100;
  spec.num_adapters = 5;
  spec.skewness = 0.2;  // = 1/num_adapters
  spec.seed = 10;

  auto trace = generate(spec);
  std::map<int, std::size_t> counts;
  for (const Request& r : trace) counts[r.adapter_id] += 1;
  REQUIRE(counts.size() == 5);
  const double expect = double(trace.size()) / 5.0;
  for (const auto& [id, n] : counts) {
    CHECK(double(n) >= 0.9 * expect);
    CHECK(double(n) <= 1.1 * expect);
  }
}

TEST_CASE("video profile carries the documented shape") {
  WorkloadSpec spec;
  spec.duration_ms = 20'000;
  spec.rate_rps = 20;
  spec.num_adapters = 2;
  spec.skewness = 0.5;
  spec.mix = {{video_profile(), 1.0}};
  spec.seed = 2;

  auto trace = generate(spec);
  REQUIRE(!trace.empty());
  for (const Request& r : trace) {
    CHECK(r.input_len == 6 * 256);
    CHECK(r.output_len >= 5);
    CHECK(r.output_len <= 10);
    CHECK(r.head == HeadKind::Task);
    CHECK(r.effective_rounds() == 1);
  }
}

TEST_CASE("spec validation") {
  WorkloadSpec spec;
  spec.num_adapters = 10;
  spec.skewness = 0.05;  // below 1/10
  CHECK_THROWS_AS(generate(spec), ConfigError);
  spec.skewness = 0.5;
  spec.rate_rps = 0;
  CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("uniform arrivals are evenly spaced") {
  WorkloadSpec spec;
  spec.duration_ms = 1000;
  spec.rate_rps = 10;
  spec.arrival = ArrivalProcess::Uniform;
  spec.num_adapters = 1;
  spec.skewness = 1.0;
  auto trace = generate(spec);
  REQUIRE(trace.size() == 10);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    CHECK(trace[i].arrival_ms - trace[i - 1].arrival_ms == Catch::Approx(100.0));
  }
}

TEST_CASE("trace round trip is lossless and byte-stable") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "loraserve_trace_test";
  fs::create_directories(dir);

  WorkloadSpec spec;
  spec.duration_ms = 60'000;
  spec.rate_rps = 170;  // ~10k rows
  spec.num_adapters = 6;
  spec.skewness = 0.6;
  spec.mix = {{vqa_profile(), 0.5}, {video_profile(), 0.5}};
  spec.seed = 77;
  auto trace = generate(spec);
  REQUIRE(trace.size() > 8000);

  save_trace(trace, dir / "t1.csv");
  auto back = load_trace(dir / "t1.csv");
  REQUIRE(back.size() == trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(back[i].id == trace[i].id);
    CHECK(back[i].adapter_id == trace[i].adapter_id);
    CHECK(back[i].input_len == trace[i].input_len);
    CHECK(back[i].output_len == trace[i].output_len);
    CHECK(back[i].head == trace[i].head);
  }

  save_trace(back, dir / "t2.csv");
  CHECK(file_bytes(dir / "t1.csv") == file_bytes(dir / "t2.csv"));
  fs::remove_all(dir);
}

TEST_CASE("malformed rows report their line number") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "loraserve_trace_bad";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "bad.csv");
    out << kTraceHeader << "\n";
    out << "1.0,0,0,8,4,lm,\n";
    out << "2.0,1,0,8,not_a_number,lm,\n";
  }
  try {
    load_trace(dir / "bad.csv");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  {
    std::ofstream out(dir / "head.csv");
    out << "wrong,header\n";
  }
  CHECK_THROWS_AS(load_trace(dir / "head.csv"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("budgets survive the round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "loraserve_trace_budget";
  fs::create_directories(dir);

  AppProfile budgeted = micro_profile();
  budgeted.budget_ms = 250.0;
  WorkloadSpec spec;
  spec.duration_ms = 2000;
  spec.rate_rps = 10;
  spec.num_adapters = 2;
  spec.skewness = 0.5;
  spec.mix = {{budgeted, 1.0}};
  auto trace = generate(spec);
  REQUIRE(!trace.empty());
  save_trace(trace, dir / "b.csv");
  auto back = load_trace(dir / "b.csv");
  REQUIRE(back[0].budget_ms.has_value());
  CHECK(*back[0].budget_ms == Catch::Approx(250.0));
  fs::remove_all(dir);
}

// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>

#include "loraserve/tiling.hpp"

using namespace loraserve;

TEST_CASE("candidate enumeration honors the constraint set") {
  // Brute-force re-enumeration of the constraint set as an independent
  // check: power-of-two edges in [16,256], inner divides outer, packed
  // footprint within budget.
  const std::size_t budget = 1 << 20;  // 1 MiB
  const std::size_t width = 4;
  auto configs = candidate_configs(budget, width);

  std::size_t expected = 0;
  for (int om = 16; om <= 256; om *= 2)
    for (int on = 16; on <= 256; on *= 2)
      for (int ok = 16; ok <= 256; ok *= 2) {
        if ((std::size_t(om) * ok + std::size_t(ok) * on + std::size_t(om) * on) *
                width >
            budget)
          continue;
        for (int im = 16; im <= om; im *= 2)
          for (int in = 16; in <= on; in *= 2)
            for (int ik = 16; ik <= ok; ik *= 2) expected += 1;
      }
  CHECK(configs.size() == expected);
  CHECK(std::is_sorted(configs.begin(), configs.end()));
  for (const auto& c : configs) {
    CHECK(c.structurally_valid());
    CHECK(c.footprint_elems() * width <= budget);
  }

  // The two reference blockings from the shape-dependence experiment must
  // be present at this budget.
  const TilingConfig small{64, 32, 32, 32, 32, 32};
  const TilingConfig large{64, 64, 64, 32, 64, 64};
  CHECK(std::find(configs.begin(), configs.end(), small) != configs.end());
  CHECK(std::find(configs.begin(), configs.end(), large) != configs.end());
}

TEST_CASE("candidate enumeration edge budgets") {
  CHECK_THROWS_AS(candidate_configs(3 * 16 * 16 * 4 - 1, 4), ConfigError);

  auto only16 = candidate_configs(3 * 16 * 16 * 4, 4);
  REQUIRE(only16.size() == 1);
  CHECK(only16[0] == TilingConfig{16, 16, 16, 16, 16, 16});
}

TEST_CASE("structural validity") {
  CHECK(TilingConfig{64, 32, 32, 32, 32, 32}.structurally_valid());
  CHECK_FALSE(TilingConfig{48, 32, 32, 16, 16, 16}.structurally_valid());  // not pow2
  CHECK_FALSE(TilingConfig{8, 32, 32, 8, 16, 16}.structurally_valid());    // < 16
  CHECK_FALSE(TilingConfig{32, 32, 32, 64, 16, 16}.structurally_valid());  // inner > outer
}

TEST_CASE("shape key bucketing") {
  CHECK(m_bucket_of(1) == 32);
  CHECK(m_bucket_of(32) == 32);
  CHECK(m_bucket_of(33) == 64);
  CHECK(m_bucket_of(4096) == 4096);
  CHECK(shape_key(33, 256, 16) == ShapeKey{64, 256, 16});
}

TEST_CASE("table lookup: exact, near bucket, default") {
  TilingTable table(TilingConfig{32, 32, 32, 32, 32, 32});
  const TilingConfig stored{64, 32, 32, 32, 32, 32};
  table.insert(ShapeKey{64, 256, 16}, stored, 1000);

  // m=33 buckets to 64: exact hit.
  CHECK(table.lookup(33, 256, 16) == stored);
  // m=90 buckets to 96, one step from 64: nearest-bucket hit.
  CHECK(table.lookup(90, 256, 16) == stored);
  // m=200 buckets to 224, far from 64: default.
  CHECK(table.lookup(200, 256, 16) == table.default_config());
  // different (k, n): default.
  CHECK(table.lookup(64, 128, 16) == table.default_config());

  // Equidistant neighbors keep the smaller bucket.
  const TilingConfig other{128, 64, 64, 32, 32, 32};
  table.insert(ShapeKey{128, 256, 16}, other, 900);
  CHECK(table.lookup(96, 256, 16) == stored);  // bucket 96: 64 and 128 tie
}

TEST_CASE("table persists through json") {
  namespace fs = std::filesystem;
  TilingTable table(TilingConfig{64, 32, 32, 32, 32, 32});
  table.insert(ShapeKey{256, 4096, 32}, TilingConfig{64, 32, 32, 32, 32, 32}, 70000);
  table.insert(ShapeKey{8192, 4096, 128}, TilingConfig{64, 64, 64, 32, 64, 64},
               100000);

  const fs::path path = fs::temp_directory_path() / "loraserve_table.json";
  table.save(path);
  TilingTable back = TilingTable::load(path);
  CHECK(back.default_config() == table.default_config());
  REQUIRE(back.size() == 2);
  CHECK(back.lookup(256, 4096, 32) == TilingConfig{64, 32, 32, 32, 32, 32});
  CHECK(back.lookup(8192, 4096, 128) == TilingConfig{64, 64, 64, 32, 64, 64});
  fs::remove(path);
}

TEST_CASE("default candidates fit the budget and stay legal") {
  auto configs = default_candidates(1 << 20, 4);
  CHECK(configs.size() >= 8);
  for (const auto& c : configs) {
    CHECK(c.structurally_valid());
    CHECK(c.footprint_elems() * 4 <= (1u << 20));
  }
}

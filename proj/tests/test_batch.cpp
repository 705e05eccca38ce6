// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <vector>

#include "loraserve/batch.hpp"
#include "loraserve/random.hpp"

using namespace loraserve;

namespace {

AdapterSet make_adapters(std::size_t L, std::size_t d,
                         const std::vector<std::pair<int, std::size_t>>& ranks,
                         std::uint64_t seed) {
  AdapterSet set;
  for (auto [id, r] : ranks) {
    set.emplace(id, LoraAdapter::random(id, L, d, r, seed + id));
  }
  return set;
}

// Row-by-row brute force through the 64-bit reference path.
Matrix<float> bypass_oracle(ConstMatSpan<float> x, std::span<const int> assignment,
                            const AdapterSet& adapters, std::size_t layer) {
  Matrix<float> out(x.rows, x.cols);
  for (std::size_t row = 0; row < x.rows; ++row) {
    const LoraAdapter& a = adapter_at(adapters, assignment[row]);
    ConstMatSpan<float> xr(x.data + row * x.cols, 1, x.cols);
    Matrix<float> mid = gemm_reference<float>(xr, a.down(layer));
    Matrix<float> rowv = gemm_reference<float>(mid, a.up(layer));
    std::copy(rowv.data(), rowv.data() + x.cols, out.data() + row * x.cols);
  }
  return out;
}

}  // namespace

TEST_CASE("plan_batch grouping rules") {
  std::vector<int> same = {3, 3, 3};
  BatchPlan p1 = plan_batch(same);
  REQUIRE(p1.segments.size() == 1);
  CHECK(p1.segments[0].adapter_id == 3);
  CHECK(p1.segments[0].rows == std::vector<std::size_t>{0, 1, 2});

  std::vector<int> interleaved = {7, 2, 7, 2};
  BatchPlan p2 = plan_batch(interleaved);
  REQUIRE(p2.segments.size() == 2);
  CHECK(p2.segments[0].adapter_id == 2);
  CHECK(p2.segments[0].rows == std::vector<std::size_t>{1, 3});
  CHECK(p2.segments[1].adapter_id == 7);
  CHECK(p2.segments[1].rows == std::vector<std::size_t>{0, 2});

  std::vector<int> distinct = {5, 1, 9};
  BatchPlan p3 = plan_batch(distinct);
  CHECK(p3.segments.size() == 3);
  for (const Segment& s : p3.segments) CHECK(s.rows.size() == 1);

  CHECK_THROWS_AS(plan_batch(std::vector<int>{}), ConfigError);
}

TEST_CASE("run_bypass matches the per-row oracle on mixed batches") {
  const std::size_t L = 2, d = 48;
  AdapterSet adapters = make_adapters(L, d, {{1, 8}, {2, 16}, {5, 4}}, 900);
  TilingTable table;
  Rng rng(77);
  for (int it = 0; it < 6; ++it) {
    const std::size_t n = 1 + (rng() % 12);
    Matrix<float> x = random_matrix<float>(n, d, rng);
    std::vector<int> assignment(n);
    const int ids[3] = {1, 2, 5};
    for (auto& a : assignment) a = ids[rng() % 3];
    BatchPlan plan = plan_batch(assignment);
    Matrix<float> got = run_bypass(x, plan, adapters, it % L, table);
    Matrix<float> want = bypass_oracle(x, assignment, adapters, it % L);
    CHECK(max_abs_diff<float>(got, want) <=
          1e-4 * std::max(1.0, max_abs<float>(want)));
  }
}

TEST_CASE("zero adapters produce zero output") {
  const std::size_t L = 1, d = 32;
  AdapterSet adapters;
  std::vector<Matrix<float>> down(L, Matrix<float>(d, 4));
  std::vector<Matrix<float>> up(L, Matrix<float>(4, d));
  adapters.emplace(1, LoraAdapter(1, L, d, 4, std::move(down), std::move(up)));
  Rng rng(1);
  Matrix<float> x = random_matrix<float>(5, d, rng);
  std::vector<int> assignment(5, 1);
  TilingTable table;
  Matrix<float> out = run_bypass(x, plan_batch(assignment), adapters, 0, table);
  CHECK(max_abs<float>(out) == 0.0);
}

TEST_CASE("bypass flop count is exact and padding-free") {
  const std::size_t L = 1, d = 64;
  TilingTable table;
  Rng rng(10);

  // Equal ranks, same per-adapter row counts, varying number of distinct
  // adapters: the multiply-add count must not move.
  std::uint64_t counts[2] = {0, 0};
  const std::size_t r = 8;
  for (int variant = 0; variant < 2; ++variant) {
    const int num_adapters = variant == 0 ? 1 : 4;
    AdapterSet adapters;
    for (int id = 0; id < num_adapters; ++id) {
      adapters.emplace(id, LoraAdapter::random(id, L, d, r, 33 + id));
    }
    Matrix<float> x = random_matrix<float>(8, d, rng);
    std::vector<int> assignment(8);
    for (std::size_t i = 0; i < 8; ++i) assignment[i] = int(i) % num_adapters;
    flops::Scope scope;
    run_bypass(x, plan_batch(assignment), adapters, 0, table);
    counts[variant] = scope.elapsed();
    CHECK(counts[variant] == 8ull * 2 * d * r * 2);
  }
  CHECK(counts[0] == counts[1]);

  // Heterogeneous ranks: each segment contributes at its own rank.
  AdapterSet mixed = make_adapters(L, d, {{1, 4}, {2, 32}}, 99);
  Matrix<float> x = random_matrix<float>(6, d, rng);
  std::vector<int> assignment = {1, 2, 1, 2, 1, 2};
  flops::Scope scope;
  run_bypass(x, plan_batch(assignment), mixed, 0, table);
  CHECK(scope.elapsed() == 3ull * 2 * d * 4 * 2 + 3ull * 2 * d * 32 * 2);
}

TEST_CASE("permutation equivariance") {
  const std::size_t L = 1, d = 40, n = 9;
  AdapterSet adapters = make_adapters(L, d, {{1, 8}, {2, 8}}, 500);
  TilingTable table;
  Rng rng(44);
  Matrix<float> x = random_matrix<float>(n, d, rng);
  std::vector<int> assignment = {1, 2, 2, 1, 1, 2, 1, 2, 1};

  Matrix<float> base = run_bypass(x, plan_batch(assignment), adapters, 0, table);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  seeded_shuffle(perm, rng);

  Matrix<float> px(n, d);
  std::vector<int> passign(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(x.data() + perm[i] * d, x.data() + (perm[i] + 1) * d,
              px.data() + i * d);
    passign[i] = assignment[perm[i]];
  }
  Matrix<float> permuted = run_bypass(px, plan_batch(passign), adapters, 0, table);
  for (std::size_t i = 0; i < n; ++i) {
    ConstMatSpan<float> got(permuted.data() + i * d, 1, d);
    ConstMatSpan<float> want(base.data() + perm[i] * d, 1, d);
    CHECK(max_abs_diff<float>(got, want) == 0.0);
  }
}

TEST_CASE("missing adapter raises") {
  TilingTable table;
  AdapterSet adapters;
  Rng rng(2);
  Matrix<float> x = random_matrix<float>(2, 32, rng);
  std::vector<int> assignment = {1, 1};
  CHECK_THROWS_AS(run_bypass(x, plan_batch(assignment), adapters, 0, table),
                  UnknownAdapterError);
}

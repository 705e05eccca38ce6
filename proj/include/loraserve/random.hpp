// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "loraserve/matrix.hpp"

namespace loraserve {

using Rng = std::mt19937_64;

template <typename T>
void fill_uniform(MatSpan<T> m, Rng& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<T> dist(lo, hi);
  const std::size_t total = m.rows * m.cols;
  for (std::size_t i = 0; i < total; ++i) m.data[i] = dist(rng);
}

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                        T lo = T(-1), T hi = T(1)) {
  Matrix<T> m(rows, cols);
  fill_uniform<T>(m, rng, lo, hi);
  return m;
}

// Fisher-Yates with an explicit modulo-free draw so shuffles are identical
// across standard library implementations (plans are golden-tested).
template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    std::uint64_t x;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    do {
      x = rng();
    } while (x >= limit);
    std::swap(v[i - 1], v[x % bound]);
  }
}

}  // namespace loraserve

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace loraserve::flops {

// Thread-local multiply-add accounting. One fused multiply-add counts as 2
// FLOPs, so a GEMM of shape (m,k)x(k,n) contributes 2*m*n*k.
inline thread_local std::uint64_t counter = 0;

inline void add(std::uint64_t n) { counter += n; }
inline std::uint64_t read() { return counter; }
inline void reset() { counter = 0; }

// Scoped reset-and-read helper for instrumented tests.
class Scope {
 public:
  Scope() : start_(counter) {}
  std::uint64_t elapsed() const { return counter - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace loraserve::flops

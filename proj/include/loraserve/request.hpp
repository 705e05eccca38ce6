// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "loraserve/model.hpp"

namespace loraserve {

enum class RequestState { Queued, Running, Done };

/// One inference job. Timestamps and the credit are in virtual milliseconds
/// on the serving clock. Credit never decreases while the request waits.
struct Request {
  std::int64_t id = 0;
  int adapter_id = 0;
  double arrival_ms = 0.0;
  int input_len = 1;
  int output_len = 1;
  HeadKind head = HeadKind::Lm;
  std::optional<double> budget_ms;

  // Runtime bookkeeping, owned by the serving loop.
  RequestState state = RequestState::Queued;
  double credit_ms = 0.0;
  int rounds_done = 0;
  double start_ms = -1.0;
  double finish_ms = -1.0;

  // Task-head requests finish in a single decode round by contract.
  int effective_rounds() const { return head == HeadKind::Task ? 1 : output_len; }
};

inline const char* head_name(HeadKind h) {
  return h == HeadKind::Task ? "task" : "lm";
}

inline HeadKind head_from_name(const std::string& s, std::size_t line) {
  if (s == "lm") return HeadKind::Lm;
  if (s == "task") return HeadKind::Task;
  throw ParseError("unknown head kind '" + s + "'", line);
}

}  // namespace loraserve

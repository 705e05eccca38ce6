// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "loraserve/adapter.hpp"
#include "loraserve/atmm.hpp"
#include "loraserve/batch.hpp"
#include "loraserve/matrix.hpp"

namespace loraserve {

using DurationNs = std::chrono::nanoseconds;

/// Stack of d x d linear layers with a fixed elementwise nonlinearity
/// between them, plus a vocabulary head. All layer weights live in one
/// contiguous allocation that is never reallocated while serving; merge and
/// unmerge patch it in place.
class BaseModel {
 public:
  BaseModel(std::size_t num_layers, std::size_t hidden_dim,
            std::size_t vocab_size)
      : num_layers_(num_layers),
        hidden_dim_(hidden_dim),
        vocab_size_(vocab_size),
        weights_(num_layers * hidden_dim * hidden_dim, 0.0f),
        lm_head_(vocab_size, hidden_dim),
        lm_head_t_(hidden_dim, vocab_size),
        scratch_(hidden_dim, hidden_dim) {
    if (num_layers < 1 || hidden_dim < 16 || vocab_size < 2) {
      throw ConfigError("model needs L >= 1, d >= 16, V >= 2");
    }
  }

  static BaseModel random(std::size_t num_layers, std::size_t hidden_dim,
                          std::size_t vocab_size, std::uint64_t seed) {
    BaseModel m(num_layers, hidden_dim, vocab_size);
    Rng rng(seed);
    const float scale = 1.0f / std::sqrt(static_cast<float>(hidden_dim));
    for (std::size_t l = 0; l < num_layers; ++l) {
      fill_uniform<float>(m.layer(l), rng, -scale, scale);
    }
    fill_uniform<float>(m.lm_head_, rng, -scale, scale);
    m.refresh_head_transpose();
    return m;
  }

  std::size_t num_layers() const { return num_layers_; }
  std::size_t hidden_dim() const { return hidden_dim_; }
  std::size_t vocab_size() const { return vocab_size_; }

  MatSpan<float> layer(std::size_t i) {
    return {weights_.data() + i * hidden_dim_ * hidden_dim_, hidden_dim_,
            hidden_dim_};
  }
  ConstMatSpan<float> layer(std::size_t i) const {
    return {weights_.data() + i * hidden_dim_ * hidden_dim_, hidden_dim_,
            hidden_dim_};
  }

  const Matrix<float>& lm_head() const { return lm_head_; }
  void set_lm_head(Matrix<float> head) {
    if (head.rows() != vocab_size_ || head.cols() != hidden_dim_) {
      throw ShapeError("lm head must be vocab x hidden_dim");
    }
    lm_head_ = std::move(head);
    refresh_head_transpose();
  }
  ConstMatSpan<float> lm_head_t() const { return lm_head_t_; }

  // Preallocated d x d buffer the switcher reuses for every layer's delta,
  // so a merge never allocates.
  MatSpan<float> scratch() { return scratch_; }

  std::size_t delta_precompute_bytes() const {
    return num_layers_ * hidden_dim_ * hidden_dim_ * sizeof(float);
  }

 private:
  void refresh_head_transpose() { lm_head_t_ = transpose<float>(lm_head_); }

  std::size_t num_layers_, hidden_dim_, vocab_size_;
  std::vector<float> weights_;
  Matrix<float> lm_head_;
  Matrix<float> lm_head_t_;
  Matrix<float> scratch_;
};

enum class InferMode { Unmerged, Merged, Mixture };

inline const char* mode_name(InferMode m) {
  switch (m) {
    case InferMode::Unmerged: return "unmerged";
    case InferMode::Merged: return "merged";
    case InferMode::Mixture: return "mixture";
  }
  return "?";
}

/// Which adapter (if any) is folded into the weights, and the shared
/// subtraction branch used by mixture mode. The branch is a reference to the
/// merged adapter's own factors, never a copy.
struct ModelState {
  InferMode mode = InferMode::Unmerged;
  int merged_adapter = -1;
  const LoraAdapter* delora_branch = nullptr;
};

inline void activation_inplace(MatSpan<float> m) {
  const std::size_t total = m.rows * m.cols;
  for (std::size_t i = 0; i < total; ++i) m.data[i] = std::tanh(m.data[i]);
}

namespace detail {
inline void delta_w_into(const LoraAdapter& adapter, std::size_t layer,
                         const TilingTable& table, MatSpan<float> out) {
  const std::size_t d = adapter.hidden_dim(), r = adapter.rank();
  atmm_multiply_into<float>(adapter.down(layer), adapter.up(layer), out,
                            table.lookup(d, r, d));
}
}  // namespace detail

/// The d x d weight increment for one layer, computed at runtime from the
/// factor pair instead of being precomputed and stored.
inline Matrix<float> delta_w(const LoraAdapter& adapter, std::size_t layer,
                             const TilingTable& table) {
  if (layer >= adapter.num_layers()) {
    throw ConfigError("layer index " + std::to_string(layer) +
                      " out of range (L=" + std::to_string(adapter.num_layers()) +
                      ")");
  }
  Matrix<float> out(adapter.hidden_dim(), adapter.hidden_dim());
  detail::delta_w_into(adapter, layer, table, out);
  return out;
}

/// Folds the adapter into every layer weight in place, in one pass, and
/// returns the measured wall clock of the whole switch.
inline DurationNs merge(BaseModel& model, ModelState& state,
                        const LoraAdapter& adapter, const TilingTable& table) {
  if (state.mode != InferMode::Unmerged) {
    throw ModeError("merge requires unmerged state (currently " +
                    std::string(mode_name(state.mode)) + ")");
  }
  if (adapter.num_layers() != model.num_layers() ||
      adapter.hidden_dim() != model.hidden_dim()) {
    throw ShapeError("adapter does not match model dimensions");
  }
  const auto t0 = std::chrono::steady_clock::now();
  MatSpan<float> scratch = model.scratch();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    detail::delta_w_into(adapter, l, table, scratch);
    add_inplace<float>(model.layer(l), scratch);
  }
  state.mode = InferMode::Merged;
  state.merged_adapter = adapter.id();
  state.delora_branch = nullptr;
  return std::chrono::duration_cast<DurationNs>(std::chrono::steady_clock::now() -
                                                t0);
}

inline DurationNs unmerge(BaseModel& model, ModelState& state,
                          const LoraAdapter& adapter, const TilingTable& table) {
  if (state.mode == InferMode::Unmerged) {
    throw ModeError("unmerge requires merged or mixture state");
  }
  if (state.merged_adapter != adapter.id()) {
    throw ModeError("unmerge of adapter " + std::to_string(adapter.id()) +
                    " but adapter " + std::to_string(state.merged_adapter) +
                    " is merged");
  }
  const auto t0 = std::chrono::steady_clock::now();
  MatSpan<float> scratch = model.scratch();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    detail::delta_w_into(adapter, l, table, scratch);
    sub_inplace<float>(model.layer(l), scratch);
  }
  state.mode = InferMode::Unmerged;
  state.merged_adapter = -1;
  state.delora_branch = nullptr;
  return std::chrono::duration_cast<DurationNs>(std::chrono::steady_clock::now() -
                                                t0);
}

/// Merged-mode stack forward: activation(x W) through every layer, zero
/// bypass work for any row.
inline Matrix<float> forward_merged(const BaseModel& model,
                                    const ModelState& state,
                                    ConstMatSpan<float> x,
                                    const TilingTable& table) {
  if (state.mode != InferMode::Merged) {
    throw ModeError("forward_merged requires merged state");
  }
  const std::size_t d = model.hidden_dim();
  if (x.cols != d) throw ShapeError("input cols must equal hidden_dim");
  Matrix<float> cur(x.rows, d);
  std::copy(x.data, x.data + x.rows * d, cur.data());
  Matrix<float> next(x.rows, d);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    atmm_multiply_into<float>(cur, model.layer(l), next,
                              table.lookup(x.rows, d, d));
    activation_inplace(next);
    std::swap(cur, next);
  }
  return cur;
}

/// Unmerged-mode forward: per layer, activation(x W + bypass) where the
/// bypass is computed segment-wise through the batch plan. Rows are
/// independent of their ordering.
inline Matrix<float> forward_unmerged(const BaseModel& model,
                                      const ModelState& state,
                                      ConstMatSpan<float> x,
                                      std::span<const int> assignment,
                                      const AdapterSet& adapters,
                                      const TilingTable& table) {
  if (state.mode != InferMode::Unmerged) {
    throw ModeError("forward_unmerged requires unmerged state");
  }
  const std::size_t d = model.hidden_dim();
  if (x.cols != d) throw ShapeError("input cols must equal hidden_dim");
  if (assignment.size() != x.rows) {
    throw ShapeError("assignment size must equal row count");
  }
  const BatchPlan plan = plan_batch(assignment);
  for (const Segment& seg : plan.segments) {
    adapter_at(adapters, seg.adapter_id);  // fail fast on unknown ids
  }
  Matrix<float> cur(x.rows, d);
  std::copy(x.data, x.data + x.rows * d, cur.data());
  Matrix<float> next(x.rows, d);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    atmm_multiply_into<float>(cur, model.layer(l), next,
                              table.lookup(x.rows, d, d));
    Matrix<float> bypass = run_bypass(cur, plan, adapters, l, table);
    add_inplace<float>(next, bypass);
    activation_inplace(next);
    std::swap(cur, next);
  }
  return cur;
}

/// Mixture-mode forward. Rows of the merged adapter ride the merged weights
/// with no bypass at all; every other row gets its own adapter bypass plus
/// the subtraction branch that cancels the folded-in delta:
///   x W_merged - (x down_1) up_1 + (x down_x) up_x.
inline Matrix<float> forward_mixture(const BaseModel& model,
                                     const ModelState& state,
                                     ConstMatSpan<float> x,
                                     std::span<const int> assignment,
                                     const AdapterSet& adapters,
                                     const TilingTable& table) {
  if (state.mode != InferMode::Mixture) {
    throw ModeError("forward_mixture requires mixture state");
  }
  if (state.delora_branch == nullptr ||
      state.delora_branch->id() != state.merged_adapter) {
    throw ModeError("mixture integrity: subtraction branch missing or not "
                    "weight-identical to the merged adapter");
  }
  const std::size_t d = model.hidden_dim();
  if (x.cols != d) throw ShapeError("input cols must equal hidden_dim");
  if (assignment.size() != x.rows) {
    throw ShapeError("assignment size must equal row count");
  }

  std::vector<std::size_t> guest_rows;  // rows not owned by the merged adapter
  std::vector<int> guest_assignment;
  for (std::size_t row = 0; row < x.rows; ++row) {
    if (assignment[row] != state.merged_adapter) {
      guest_rows.push_back(row);
      guest_assignment.push_back(assignment[row]);
    }
  }
  std::optional<BatchPlan> guest_plan;
  if (!guest_rows.empty()) {
    guest_plan = plan_batch(guest_assignment);
    for (const Segment& seg : guest_plan->segments) {
      adapter_at(adapters, seg.adapter_id);
    }
  }
  const LoraAdapter& delora = *state.delora_branch;
  BatchPlan delora_plan;
  delora_plan.total_rows = guest_rows.size();
  if (!guest_rows.empty()) {
    Segment all;
    all.adapter_id = delora.id();
    for (std::size_t i = 0; i < guest_rows.size(); ++i) all.rows.push_back(i);
    delora_plan.segments.push_back(std::move(all));
  }
  AdapterSet delora_set;
  if (!guest_rows.empty()) {
    delora_set.emplace(delora.id(),
                       adapter_at(adapters, delora.id()));
  }

  Matrix<float> cur(x.rows, d);
  std::copy(x.data, x.data + x.rows * d, cur.data());
  Matrix<float> next(x.rows, d);
  Matrix<float> gathered(std::max<std::size_t>(guest_rows.size(), 1), d);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    atmm_multiply_into<float>(cur, model.layer(l), next,
                              table.lookup(x.rows, d, d));
    if (!guest_rows.empty()) {
      for (std::size_t i = 0; i < guest_rows.size(); ++i) {
        const float* src = cur.data() + guest_rows[i] * d;
        std::copy(src, src + d, gathered.data() + i * d);
      }
      MatSpan<float> gview(gathered.data(), guest_rows.size(), d);
      Matrix<float> own = run_bypass(gview, *guest_plan, adapters, l, table);
      Matrix<float> cancel = run_bypass(gview, delora_plan, delora_set, l, table);
      for (std::size_t i = 0; i < guest_rows.size(); ++i) {
        float* dst = next.data() + guest_rows[i] * d;
        const float* o = own.data() + i * d;
        const float* s = cancel.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += o[j] - s[j];
      }
    }
    activation_inplace(next);
    std::swap(cur, next);
  }
  return cur;
}

enum class HeadKind { Lm, Task };

struct DecodeContext {
  int adapter_id = 0;
  HeadKind head = HeadKind::Lm;
};

/// Runs `rounds` single-row passes through the stack plus the head
/// projection, in whatever inference mode the state is in, and returns each
/// round's measured duration. Task-head requests complete in one round by
/// contract; callers enforce rounds == 1 for them.
inline std::vector<DurationNs> decode(const BaseModel& model,
                                      const ModelState& state,
                                      const DecodeContext& ctx, int rounds,
                                      const AdapterSet& adapters,
                                      const TilingTable& table) {
  if (rounds < 1) throw ConfigError("decode needs rounds >= 1");
  const LoraAdapter& adapter = adapter_at(adapters, ctx.adapter_id);
  if (ctx.head == HeadKind::Task && !adapter.has_task_head()) {
    throw ConfigError("adapter " + std::to_string(ctx.adapter_id) +
                      " has no task head");
  }
  if (ctx.head == HeadKind::Task && rounds != 1) {
    throw ConfigError("task-head requests decode in exactly one round");
  }
  const std::size_t d = model.hidden_dim();
  Rng rng(0x10adull + static_cast<std::uint64_t>(ctx.adapter_id));
  Matrix<float> x = random_matrix<float>(1, d, rng);
  std::vector<int> assignment = {ctx.adapter_id};

  std::vector<DurationNs> durations;
  durations.reserve(rounds);
  for (int round = 0; round < rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    Matrix<float> hidden =
        state.mode == InferMode::Merged
            ? forward_merged(model, state, x, table)
        : state.mode == InferMode::Mixture
            ? forward_mixture(model, state, x, assignment, adapters, table)
            : forward_unmerged(model, state, x, assignment, adapters, table);
    if (ctx.head == HeadKind::Task) {
      atmm_multiply<float>(hidden, adapter.task_head_t(),
                           table.lookup(1, d, adapter.task_head().rows()));
    } else {
      atmm_multiply<float>(hidden, model.lm_head_t(),
                           table.lookup(1, d, model.vocab_size()));
    }
    durations.push_back(std::chrono::duration_cast<DurationNs>(
        std::chrono::steady_clock::now() - t0));
    x = std::move(hidden);  // next round consumes this round's output
  }
  return durations;
}

}  // namespace loraserve

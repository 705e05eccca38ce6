// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "loraserve/matrix.hpp"
#include "loraserve/random.hpp"

namespace loraserve {

/// Per-layer low-rank factor pair (down: d x r, up: r x d) plus an optional
/// task head (classes x d) that replaces the vocabulary head so the request
/// finishes in a single decode round. Immutable after construction.
class LoraAdapter {
 public:
  LoraAdapter(int id, std::size_t num_layers, std::size_t hidden_dim,
              std::size_t rank, std::vector<Matrix<float>> down,
              std::vector<Matrix<float>> up,
              std::optional<Matrix<float>> task_head = std::nullopt)
      : id_(id),
        rank_(rank),
        hidden_dim_(hidden_dim),
        down_(std::move(down)),
        up_(std::move(up)),
        task_head_(std::move(task_head)) {
    if (rank_ >= hidden_dim_) {
      throw ConfigError("adapter rank must be < hidden dim");
    }
    if (down_.size() != num_layers || up_.size() != num_layers) {
      throw ConfigError("adapter needs a down/up pair for every layer");
    }
    for (std::size_t l = 0; l < num_layers; ++l) {
      if (down_[l].rows() != hidden_dim_ || down_[l].cols() != rank_ ||
          up_[l].rows() != rank_ || up_[l].cols() != hidden_dim_) {
        throw ShapeError("adapter layer " + std::to_string(l) +
                         " factor shapes do not match (d=" +
                         std::to_string(hidden_dim_) + ", r=" +
                         std::to_string(rank_) + ")");
      }
    }
    if (task_head_) {
      if (task_head_->cols() != hidden_dim_) {
        throw ShapeError("task head must be classes x hidden_dim");
      }
      task_head_t_ = transpose<float>(*task_head_);
    }
  }

  static LoraAdapter random(int id, std::size_t num_layers,
                            std::size_t hidden_dim, std::size_t rank,
                            std::uint64_t seed,
                            std::optional<std::size_t> head_classes = {}) {
    Rng rng(seed);
    // Scaled so a bypass contribution is the same order as a base layer
    // output, keeping the mode-equivalence checks numerically meaningful.
    const float scale = 1.0f / std::sqrt(static_cast<float>(rank));
    std::vector<Matrix<float>> down, up;
    for (std::size_t l = 0; l < num_layers; ++l) {
      down.push_back(random_matrix<float>(hidden_dim, rank, rng, -scale, scale));
      up.push_back(random_matrix<float>(rank, hidden_dim, rng, -scale, scale));
    }
    std::optional<Matrix<float>> head;
    if (head_classes) {
      const float hs = 1.0f / std::sqrt(static_cast<float>(hidden_dim));
      head = random_matrix<float>(*head_classes, hidden_dim, rng, -hs, hs);
    }
    return LoraAdapter(id, num_layers, hidden_dim, rank, std::move(down),
                       std::move(up), std::move(head));
  }

  int id() const { return id_; }
  std::size_t rank() const { return rank_; }
  std::size_t hidden_dim() const { return hidden_dim_; }
  std::size_t num_layers() const { return down_.size(); }

  ConstMatSpan<float> down(std::size_t layer) const { return down_.at(layer); }
  ConstMatSpan<float> up(std::size_t layer) const { return up_.at(layer); }

  bool has_task_head() const { return task_head_.has_value(); }
  const Matrix<float>& task_head() const { return *task_head_; }
  // Cached d x C transpose, the shape the projection GEMM consumes.
  ConstMatSpan<float> task_head_t() const { return *task_head_t_; }

  std::size_t bytes() const {
    return num_layers() * (2 * hidden_dim_ * rank_) * sizeof(float);
  }

 private:
  int id_;
  std::size_t rank_;
  std::size_t hidden_dim_;
  std::vector<Matrix<float>> down_;
  std::vector<Matrix<float>> up_;
  std::optional<Matrix<float>> task_head_;
  std::optional<Matrix<float>> task_head_t_;
};

// Node-based map keeps adapter addresses stable; the deLoRA branch holds a
// plain pointer into this set.
using AdapterSet = std::map<int, LoraAdapter>;

inline const LoraAdapter& adapter_at(const AdapterSet& set, int id) {
  auto it = set.find(id);
  if (it == set.end()) throw UnknownAdapterError(id);
  return it->second;
}

}  // namespace loraserve

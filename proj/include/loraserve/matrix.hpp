// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "loraserve/errors.hpp"
#include "loraserve/flops.hpp"

namespace loraserve {

/// Dense row-major matrix with a single contiguous allocation.
/// Scalar type is chosen at construction: Matrix<float> (the serving
/// default) or Matrix<double> (oracle-grade checks).
template <typename T>
class Matrix {
  static_assert(std::is_floating_point_v<T>);

 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be >= 1, got " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

/// Non-owning mutable view over a row-major block. BaseModel hands these out
/// for its contiguously allocated layer weights.
template <typename T>
struct MatSpan {
  T* data = nullptr;
  std::size_t rows = 0, cols = 0;

  MatSpan() = default;
  MatSpan(T* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
  MatSpan(Matrix<T>& m) : data(m.data()), rows(m.rows()), cols(m.cols()) {}

  T& operator()(std::size_t i, std::size_t j) const {
    return data[i * cols + j];
  }
};

template <typename T>
struct ConstMatSpan {
  const T* data = nullptr;
  std::size_t rows = 0, cols = 0;

  ConstMatSpan() = default;
  ConstMatSpan(const T* d, std::size_t r, std::size_t c)
      : data(d), rows(r), cols(c) {}
  ConstMatSpan(const Matrix<T>& m)
      : data(m.data()), rows(m.rows()), cols(m.cols()) {}
  ConstMatSpan(MatSpan<T> m) : data(m.data), rows(m.rows), cols(m.cols) {}

  const T& operator()(std::size_t i, std::size_t j) const {
    return data[i * cols + j];
  }
};

namespace detail {
template <typename T>
inline void require_same_shape(ConstMatSpan<T> a, ConstMatSpan<T> b,
                               const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw ShapeError(a.rows, a.cols, b.rows, b.cols, op);
  }
}
}  // namespace detail

/// Naive triple-loop GEMM with 64-bit accumulation regardless of storage
/// type. This is the correctness oracle for the tiled kernel; it must stay
/// strictly more accurate than the path it referees.
template <typename T>
Matrix<T> gemm_reference(ConstMatSpan<T> a, ConstMatSpan<T> b) {
  if (a.cols != b.rows) {
    throw ShapeError(a.rows, a.cols, b.rows, b.cols, "gemm_reference");
  }
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  Matrix<T> c(m, n);
  flops::add(2ull * m * n * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a(i, p)) * static_cast<double>(b(p, j));
      }
      c(i, j) = static_cast<T>(acc);
    }
  }
  return c;
}

/// target += delta, elementwise, no reallocation and no copy of target.
template <typename T>
void add_inplace(MatSpan<T> target, ConstMatSpan<T> delta) {
  detail::require_same_shape<T>(target, delta, "add_inplace");
  const std::size_t total = target.rows * target.cols;
  for (std::size_t i = 0; i < total; ++i) target.data[i] += delta.data[i];
}

template <typename T>
void sub_inplace(MatSpan<T> target, ConstMatSpan<T> delta) {
  detail::require_same_shape<T>(target, delta, "sub_inplace");
  const std::size_t total = target.rows * target.cols;
  for (std::size_t i = 0; i < total; ++i) target.data[i] -= delta.data[i];
}

template <typename T>
double max_abs_diff(ConstMatSpan<T> a, ConstMatSpan<T> b) {
  detail::require_same_shape<T>(a, b, "max_abs_diff");
  double worst = 0.0;
  const std::size_t total = a.rows * a.cols;
  for (std::size_t i = 0; i < total; ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) -
                                     static_cast<double>(b.data[i])));
  }
  return worst;
}

template <typename T>
double max_abs(ConstMatSpan<T> a) {
  double worst = 0.0;
  const std::size_t total = a.rows * a.cols;
  for (std::size_t i = 0; i < total; ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data[i])));
  }
  return worst;
}

template <typename T>
Matrix<T> transpose(ConstMatSpan<T> a) {
  Matrix<T> t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Fixture serialization.
//
// Binary format, little-endian: rows u32, cols u32, scalar-width u8,
// then the row-major payload. CSV is load-only, for small hand-written
// fixtures.
// ---------------------------------------------------------------------------

template <typename T>
void save_matrix(ConstMatSpan<T> m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path.string());
  const std::uint32_t rows = static_cast<std::uint32_t>(m.rows);
  const std::uint32_t cols = static_cast<std::uint32_t>(m.cols);
  const std::uint8_t width = sizeof(T);
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  out.write(reinterpret_cast<const char*>(&width), 1);
  out.write(reinterpret_cast<const char*>(m.data),
            static_cast<std::streamsize>(sizeof(T) * m.rows * m.cols));
  if (!out) throw IoError("short write: " + path.string());
}

template <typename T>
Matrix<T> load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for read: " + path.string());
  std::uint32_t rows = 0, cols = 0;
  std::uint8_t width = 0;
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  in.read(reinterpret_cast<char*>(&width), 1);
  if (!in) throw IoError("truncated header: " + path.string());
  if (width != sizeof(T)) {
    throw IoError("scalar width mismatch in " + path.string() + ": file has " +
                  std::to_string(width) + ", expected " +
                  std::to_string(sizeof(T)));
  }
  Matrix<T> m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(T) * m.size()));
  if (!in) throw IoError("truncated payload: " + path.string());
  return m;
}

template <typename T>
Matrix<T> load_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for read: " + path.string());
  std::vector<std::vector<T>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<T> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(static_cast<T>(std::stod(cell)));
      } catch (const std::exception&) {
        throw ParseError("bad numeric cell '" + cell + "'", lineno);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError("ragged row: expected " +
                           std::to_string(rows.front().size()) + " cells, got " +
                           std::to_string(row.size()),
                       lineno);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("empty csv matrix: " + path.string());
  Matrix<T> m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

}  // namespace loraserve

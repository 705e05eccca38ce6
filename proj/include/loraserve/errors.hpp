// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace loraserve {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between two operands; message carries both shapes.
class ShapeError : public Error {
 public:
  ShapeError(std::size_t a_rows, std::size_t a_cols, std::size_t b_rows,
             std::size_t b_cols, const std::string& what_op)
      : Error(what_op + ": shape mismatch " + std::to_string(a_rows) + "x" +
              std::to_string(a_cols) + " vs " + std::to_string(b_rows) + "x" +
              std::to_string(b_cols)) {}
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Illegal inference-mode transition or merge/unmerge misuse.
class ModeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// CSV / fixture parsing failure; carries the offending line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class UnknownAdapterError : public Error {
 public:
  explicit UnknownAdapterError(int id)
      : Error("unknown adapter id " + std::to_string(id)), id_(id) {}
  int id() const { return id_; }

 private:
  int id_;
};

// A knowledge source whose accuracy requirement cannot be met even alone.
class UnsatisfiableSourceError : public Error {
 public:
  UnsatisfiableSourceError(const std::string& source_id, double acc,
                           double requirement)
      : Error("source '" + source_id + "' cannot meet its own requirement (" +
              std::to_string(acc) + " < " + std::to_string(requirement) + ")"),
        source_id_(source_id) {}
  const std::string& source_id() const { return source_id_; }

 private:
  std::string source_id_;
};

}  // namespace loraserve

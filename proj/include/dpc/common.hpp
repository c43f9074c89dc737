#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dpc {

/// Dense row-major matrix; rows index points throughout the library.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Index = std::int32_t;

/// n x k integer table stored row-major.
struct IndexTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Index> data;

  IndexTable() = default;
  IndexTable(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  Index& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  Index operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  const Index* row(std::size_t i) const { return data.data() + i * cols; }

  bool operator==(const IndexTable&) const = default;
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate an operation's preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

enum class ParseErrorKind { MalformedHeader, NonNumeric, EmptyVertexList, Truncated };

class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), kind_(kind), line_(line) {}
  ParseErrorKind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  ParseErrorKind kind_;
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class CorruptFile : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or activation; training has diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpc

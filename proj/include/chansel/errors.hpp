#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace chansel {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or rank mismatch between operands.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Bad argument value: out-of-range index, invalid ratio, label outside
// [0, classes), step outside the schedule, and similar.
class ArgumentError : public Error {
public:
  using Error::Error;
};

// Invalid or inconsistent run configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

// On-disk format violation. kind() distinguishes the failure classes so
// callers and tests can tell a bad magic from a truncated payload.
class FormatError : public Error {
public:
  enum class Kind { bad_magic, bad_version, truncated, malformed };

  FormatError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

// Filesystem failure (open/read/write).
class IoError : public Error {
public:
  using Error::Error;
};

// NaN or Inf reached a place that must stay finite: an op output on finite
// inputs, or a gradient handed to the optimizer.
class NumericError : public Error {
public:
  using Error::Error;
};

// A softmax or normalization row with no admissible mass.
class DegenerateRowError : public Error {
public:
  DegenerateRowError(std::size_t row, const std::string& msg)
      : Error(msg), row_(row) {}
  std::size_t row() const noexcept { return row_; }

private:
  std::size_t row_;
};

// An aggregation-token/head pair whose extracted weight row carries no
// channel mass. pair_index identifies the offending (cat, head) pair.
class DegenerateCatError : public DegenerateRowError {
public:
  DegenerateCatError(std::size_t pair_index, const std::string& msg)
      : DegenerateRowError(pair_index, msg) {}
  std::size_t pair_index() const noexcept { return row(); }
};

// Operation invoked out of order (e.g. refine without prior scores, second
// backward pass on a consumed tape).
class WorkflowError : public Error {
public:
  using Error::Error;
};

}  // namespace chansel

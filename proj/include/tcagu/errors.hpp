#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tcagu {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or matrix extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value left the domain where an operation is defined (tiny divisor, NaN, ...).
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, foreign tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid synthetic-scene specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Scene too degenerate for endmember extraction.
class DegenerateSceneError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file; carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace tcagu

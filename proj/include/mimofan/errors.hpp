#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mimofan {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or pyramid shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input values violate a domain constraint (e.g. non-binary mask).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse: calling an operation outside its contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Network configuration and parameters disagree.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied arguments (CLI flags, fold counts, epochs...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// File system failure; the message carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during training or verification.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Statistical test input with zero variance.
class DegenerateSampleError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary/text input; carries the byte offset where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace mimofan

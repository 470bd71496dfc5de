#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flame {

// Every failure raised by the library derives from Error so callers can map
// categories onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A client resource budget (active experts or LoRA rank) that cannot be honoured.
class BudgetError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Non-finite values, divergence, or iteration limits hit.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public IoError {
 public:
  using IoError::IoError;
};

/// Corrupt or truncated persisted data; `offset` is the byte position where
/// the problem was detected.
class IntegrityError : public IoError {
 public:
  IntegrityError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace flame

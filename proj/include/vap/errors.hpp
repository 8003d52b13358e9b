#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace vap {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument outside the mathematical domain of an operation (negative time,
/// state index > 255, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (unsorted segments, bad manifest row).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor or window shape mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Unsupported or corrupt file encoding.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Audio with the wrong number of channels.
class ChannelCountError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Invalid configuration (non-positive hyperparameters, degenerate specs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures; the message always carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct Warning {
  std::string context;
  std::string message;
};

/// Collects fail-soft warnings (truncations, skipped samples) so callers can
/// report them with provenance instead of aborting.
class Diagnostics {
 public:
  void warn(std::string context, std::string message) {
    warnings_.push_back({std::move(context), std::move(message)});
  }
  const std::vector<Warning>& warnings() const { return warnings_; }
  bool empty() const { return warnings_.empty(); }
  std::size_t size() const { return warnings_.size(); }
  void clear() { warnings_.clear(); }

 private:
  std::vector<Warning> warnings_;
};

inline void warn(Diagnostics* diag, std::string context, std::string message) {
  if (diag) diag->warn(std::move(context), std::move(message));
}

}  // namespace vap

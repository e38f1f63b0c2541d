#pragma once

#include <stdexcept>
#include <string>

namespace tdu {

// Shape/dimension violations: messages always name the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values detected in checked mode, or a diverged training run.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument values (probabilities, labels, thresholds, ...).
class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint I/O failures, split by cause so callers can distinguish them.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { version_mismatch, truncated, shape_mismatch, io };

  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace tdu

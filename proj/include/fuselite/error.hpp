#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fuselite {

enum class ErrorCode {
  InvalidArgument,
  DegenerateCorners,
  DegenerateMatrix,
  DimensionMismatch,
  ShapeMismatch,
  PatchSizeMismatch,
  MissingReference,
  DecodeError,
  TooFewImages,
  ImageTooSmall,
  WeightsUnavailable,
  DataUnavailable,
  NonFiniteLoss,
  CheckpointMismatch,
  IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

// Single exception type for the library; `code()` tells callers which
// contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) {
    fail(code, message);
  }
}

}  // namespace fuselite

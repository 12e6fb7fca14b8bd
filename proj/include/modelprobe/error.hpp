#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace modelprobe {

enum class ErrorCode {
  IoFailure,
  NotAnArchive,
  BadMagic,
  Truncated,
  UnsupportedVersion,
  MalformedModel,
  ShapeMismatch,
  UnsupportedOp,
  CorruptRegistry,
  EmptyRegistry,
  EmptyExampleSet,
  LengthMismatch,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code);

// Single exception type for every domain failure; the code is what callers
// (and the CLI's machine-readable error output) dispatch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace modelprobe

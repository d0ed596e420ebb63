#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace freesim {

enum class ErrorCode {
  MissingFile,
  MalformedManifest,
  DimensionMismatch,
  BadMagic,
  VersionUnsupported,
  TruncatedFile,
  InvalidConfig,
  NonFiniteParameter,
  NonFiniteLoss,
  TrajectoryTooShort,
  EmptyDataset,
  SingularSystem,
  ImageTooSmall,
  NonPSD,
  EmptySet,
  ProtocolError,
  Timeout,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Domain error carrying a machine-readable code. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace freesim

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace zeco {

enum class ErrorCode {
  InvalidArgument,
  NonFinite,
  ShapeMismatch,
  HeaderError,
  MetadataError,
  TruncatedPayload,
  PlacementFailure,
  PathCollision,
  ChecksumMismatch,
  ConfigHashMismatch,
  BackboneMismatch,
  MissingCheckpoint,
  NonFiniteLoss,
  FrozenWeightMutation,
  UnpairedEntries,
  UnequalBudgets,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a code so callers (and the CLI
// exit status) can tell error classes apart without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace zeco

#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace mtend {

enum class ErrorCode {
  Parse,
  Validation,
  UnknownId,
  OutOfRange,
  NoPath,
  StartOccupied,
  GoalOccupied,
  DivergedBand,
  AllInfeasible,
  JointLimit,
  Singular,
  NoConverge,
  EmptyRegion,
  Unreachable,
  BranchJump,
  CollisionOnPath,
  WrongMode,
  UnknownProfile,
  StaleProposal,
  HintInfeasible,
  NegativeDifference,
  Cancelled,
  Io,
};

const char* to_string(ErrorCode code);

/// Exception carrying a machine-readable code and, where it applies, the
/// index of the offending element (polygon, waypoint, segment).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(message), code_(code), index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace mtend

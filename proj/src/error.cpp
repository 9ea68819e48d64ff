#include "mtend/error.hpp"

namespace mtend {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Parse: return "ParseError";
    case ErrorCode::Validation: return "ValidationError";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::NoPath: return "NoPath";
    case ErrorCode::StartOccupied: return "StartOccupied";
    case ErrorCode::GoalOccupied: return "GoalOccupied";
    case ErrorCode::DivergedBand: return "DivergedBand";
    case ErrorCode::AllInfeasible: return "AllInfeasible";
    case ErrorCode::JointLimit: return "JointLimit";
    case ErrorCode::Singular: return "Singular";
    case ErrorCode::NoConverge: return "NoConverge";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::Unreachable: return "Unreachable";
    case ErrorCode::BranchJump: return "BranchJump";
    case ErrorCode::CollisionOnPath: return "CollisionOnPath";
    case ErrorCode::WrongMode: return "WrongMode";
    case ErrorCode::UnknownProfile: return "UnknownProfile";
    case ErrorCode::StaleProposal: return "StaleProposal";
    case ErrorCode::HintInfeasible: return "HintInfeasible";
    case ErrorCode::NegativeDifference: return "NegativeDifference";
    case ErrorCode::Cancelled: return "Cancelled";
    case ErrorCode::Io: return "IoError";
  }
  return "Unknown";
}

}  // namespace mtend

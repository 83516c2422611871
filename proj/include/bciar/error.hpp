#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bciar {

// Error codes shared by every module. Each thrown bciar::Error carries one.
enum class Errc {
  InvalidArgument,
  InvalidPose,
  FrameMismatch,
  RepsOutOfRange,
  WindowTooShort,
  InsufficientTrials,
  ZeroBaseline,
  TargetCountOutOfRange,
  NotInConfirmPhase,
  DegenerateCorners,
  NoConvergence,
  DegenerateMotions,
  TooFewSamples,
  JointLimit,
  IkFailure,
  OutOfWorkspace,
  MalformedFrame,
  Unreachable,
  Rejected,
  EmptyTrace,
  ZeroTotal,
  ZeroTrials,
  NoCompletedTrials,
  EmptyInput,
  InvalidConfig,
  ParseError,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::InvalidPose: return "InvalidPose";
    case Errc::FrameMismatch: return "FrameMismatch";
    case Errc::RepsOutOfRange: return "RepsOutOfRange";
    case Errc::WindowTooShort: return "WindowTooShort";
    case Errc::InsufficientTrials: return "InsufficientTrials";
    case Errc::ZeroBaseline: return "ZeroBaseline";
    case Errc::TargetCountOutOfRange: return "TargetCountOutOfRange";
    case Errc::NotInConfirmPhase: return "NotInConfirmPhase";
    case Errc::DegenerateCorners: return "DegenerateCorners";
    case Errc::NoConvergence: return "NoConvergence";
    case Errc::DegenerateMotions: return "DegenerateMotions";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::JointLimit: return "JointLimit";
    case Errc::IkFailure: return "IkFailure";
    case Errc::OutOfWorkspace: return "OutOfWorkspace";
    case Errc::MalformedFrame: return "MalformedFrame";
    case Errc::Unreachable: return "Unreachable";
    case Errc::Rejected: return "Rejected";
    case Errc::EmptyTrace: return "EmptyTrace";
    case Errc::ZeroTotal: return "ZeroTotal";
    case Errc::ZeroTrials: return "ZeroTrials";
    case Errc::NoCompletedTrials: return "NoCompletedTrials";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::ParseError: return "ParseError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace bciar

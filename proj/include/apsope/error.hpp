#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace apsope {

enum class ErrorCode {
  kEmptyDataset,
  kParseError,
  kUnknownAction,
  kMissingValue,
  kDimensionMismatch,
  kInvalidArgument,
  kRankDeficient,
  kDegenerateDeciles,
  kNonPositiveBandwidth,
  kOffsetOutOfRange,
  kSubsampleTooSmall,
  kFullCollinearity,
  kMissingFit,
  kEmptyCell,
  kDenominatorNearZero,
  kConfig,
};

constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kUnknownAction: return "UnknownAction";
    case ErrorCode::kMissingValue: return "MissingValue";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kDegenerateDeciles: return "DegenerateDeciles";
    case ErrorCode::kNonPositiveBandwidth: return "NonPositiveBandwidth";
    case ErrorCode::kOffsetOutOfRange: return "OffsetOutOfRange";
    case ErrorCode::kSubsampleTooSmall: return "SubsampleTooSmall";
    case ErrorCode::kFullCollinearity: return "FullCollinearity";
    case ErrorCode::kMissingFit: return "MissingFit";
    case ErrorCode::kEmptyCell: return "EmptyCell";
    case ErrorCode::kDenominatorNearZero: return "DenominatorNearZero";
    case ErrorCode::kConfig: return "ConfigError";
  }
  return "Unknown";
}

// All library failures surface as this exception; `code()` is stable for
// callers that need to branch (the CLI maps it to exit codes).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace apsope

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dualfuse {

enum class ErrorCode {
  kShapeMismatch,
  kHeadsDontDivide,
  kNotScalarRoot,
  kTapeConsumed,
  kNonDeterministicFunction,
  kNegativeStd,
  kNonFiniteValue,
  kKernelTooLarge,
  kPoolTooLarge,
  kBadRate,
  kLabelOutOfRange,
  kUnknownVariant,
  kBadMagic,
  kShapeMismatchWithManifest,
  kTruncatedFile,
  kTooFewSamples,
  kBadConfig,
  kNonFiniteGradient,
  kEmptyEvalSet,
  kEmptyMatrix,
  kRatioMismatch,
  kBackboneMutated,
  kEmptyCandidates,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kHeadsDontDivide: return "HeadsDontDivide";
    case ErrorCode::kNotScalarRoot: return "NotScalarRoot";
    case ErrorCode::kTapeConsumed: return "TapeConsumed";
    case ErrorCode::kNonDeterministicFunction: return "NonDeterministicFunction";
    case ErrorCode::kNegativeStd: return "NegativeStd";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kKernelTooLarge: return "KernelTooLarge";
    case ErrorCode::kPoolTooLarge: return "PoolTooLarge";
    case ErrorCode::kBadRate: return "BadRate";
    case ErrorCode::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::kUnknownVariant: return "UnknownVariant";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kShapeMismatchWithManifest: return "ShapeMismatchWithManifest";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kTooFewSamples: return "TooFewSamples";
    case ErrorCode::kBadConfig: return "BadConfig";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kEmptyEvalSet: return "EmptyEvalSet";
    case ErrorCode::kEmptyMatrix: return "EmptyMatrix";
    case ErrorCode::kRatioMismatch: return "RatioMismatch";
    case ErrorCode::kBackboneMutated: return "BackboneMutated";
    case ErrorCode::kEmptyCandidates: return "EmptyCandidates";
    case ErrorCode::kIo: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace dualfuse

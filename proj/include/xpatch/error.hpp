#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xpatch {

enum class ErrorCode {
  BadMagic,
  ShapeMismatch,
  TruncatedPayload,
  VocabMaskInvalid,
  InvalidConfig,
  PairMismatch,
  TokenOutOfRange,
  BoundaryOutOfRange,
  BoundaryMismatch,
  DimMismatch,
  InvalidSpec,
  AlphaOutOfRange,
  WindowOutOfRange,
  WindowOverlapsLayerSet,
  RankExceedsFit,
  NonFiniteLoss,
  DumpMisaligned,
  EmptyInput,
  InvalidArgument,
  MissingInput,
  StageDependencyUnmet,
  NoResults,
  Io,
  Parse,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::VocabMaskInvalid: return "VocabMaskInvalid";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::PairMismatch: return "PairMismatch";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::BoundaryOutOfRange: return "BoundaryOutOfRange";
    case ErrorCode::BoundaryMismatch: return "BoundaryMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::AlphaOutOfRange: return "AlphaOutOfRange";
    case ErrorCode::WindowOutOfRange: return "WindowOutOfRange";
    case ErrorCode::WindowOverlapsLayerSet: return "WindowOverlapsLayerSet";
    case ErrorCode::RankExceedsFit: return "RankExceedsFit";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DumpMisaligned: return "DumpMisaligned";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MissingInput: return "MissingInput";
    case ErrorCode::StageDependencyUnmet: return "StageDependencyUnmet";
    case ErrorCode::NoResults: return "NoResults";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Parse: return "Parse";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define XPATCH_CHECK(cond, code, msg)                 \
  do {                                                \
    if (!(cond)) throw ::xpatch::Error((code), (msg)); \
  } while (0)

}  // namespace xpatch

#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace niab {

enum class ErrorCode {
  // episode-model
  MalformedRecord,
  UnknownScene,
  DuplicateEpisodeId,
  LabelOutOfRange,
  ActionNotInVocab,
  // scene-gen
  VocabTooSmall,
  InfeasibleTemplate,
  EmptyStratum,
  // embedding
  TokenMissing,
  ZeroVector,
  EmptyVocab,
  BadTableFile,
  // ranker / trainer
  OddDim,
  AllKeysMasked,
  ShapeMismatch,
  NonFiniteActivation,
  TargetMasked,
  NonFiniteGradient,
  BadCheckpoint,
  // simulator
  NoExpansion,
  PreconditionUnsatisfiable,
  ExecutionFault,
  BadSimData,
  // eval
  MissingPrediction,
  // plumbing
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

// Validation errors map to CLI exit code 1, everything else to 2.
bool is_validation_error(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> line = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  // 1-based line number for record-level parse failures.
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> line_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace niab

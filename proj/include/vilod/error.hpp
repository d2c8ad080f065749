#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vilod {

// Every failure surfaced by the engine carries one of these codes. The
// service layer maps each code to exactly one HTTP status.
enum class Errc {
  // dataset_io
  MalformedLine,
  OutOfRange,
  MissingSplit,
  DuplicateImageId,
  UnknownClass,
  // projection
  KTooLarge,
  DegenerateRow,
  DegenerateInput,
  PerplexityTooLarge,
  // uncertainty
  ScoreOutOfRange,
  TooFewPoints,
  NegativeWeight,
  // detector
  BackendUnavailable,
  TrainingFailed,
  ConcurrentTraining,
  UnknownModel,
  ProtocolError,
  // evaluation
  DegenerateBox,
  EmptyEvalSet,
  // workflow
  BudgetExceeded,
  NotSelectable,
  PhaseViolation,
  NotPending,
  ReplayExhausted,
  MalformedBoxes,
  // persistence
  UnknownImage,
  NoSnapshot,
  StorageError,
  // service
  NoSession,
  Unauthorized,
  NotFound,
  // generic precondition failure
  InvalidArgument,
};

std::string_view errc_name(Errc code) noexcept;
std::optional<Errc> errc_from_name(std::string_view name) noexcept;

class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), detail_(what) {}

  Errc code() const noexcept { return code_; }
  // what() without the code prefix
  const std::string& detail() const noexcept { return detail_; }

private:
  Errc code_;
  std::string detail_;
};

} // namespace vilod

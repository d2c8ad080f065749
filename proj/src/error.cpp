#include "vilod/error.hpp"

namespace vilod {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
  case Errc::MalformedLine: return "MalformedLine";
  case Errc::OutOfRange: return "OutOfRange";
  case Errc::MissingSplit: return "MissingSplit";
  case Errc::DuplicateImageId: return "DuplicateImageId";
  case Errc::UnknownClass: return "UnknownClass";
  case Errc::KTooLarge: return "KTooLarge";
  case Errc::DegenerateRow: return "DegenerateRow";
  case Errc::DegenerateInput: return "DegenerateInput";
  case Errc::PerplexityTooLarge: return "PerplexityTooLarge";
  case Errc::ScoreOutOfRange: return "ScoreOutOfRange";
  case Errc::TooFewPoints: return "TooFewPoints";
  case Errc::NegativeWeight: return "NegativeWeight";
  case Errc::BackendUnavailable: return "BackendUnavailable";
  case Errc::TrainingFailed: return "TrainingFailed";
  case Errc::ConcurrentTraining: return "ConcurrentTraining";
  case Errc::UnknownModel: return "UnknownModel";
  case Errc::ProtocolError: return "ProtocolError";
  case Errc::DegenerateBox: return "DegenerateBox";
  case Errc::EmptyEvalSet: return "EmptyEvalSet";
  case Errc::BudgetExceeded: return "BudgetExceeded";
  case Errc::NotSelectable: return "NotSelectable";
  case Errc::PhaseViolation: return "PhaseViolation";
  case Errc::NotPending: return "NotPending";
  case Errc::ReplayExhausted: return "ReplayExhausted";
  case Errc::MalformedBoxes: return "MalformedBoxes";
  case Errc::UnknownImage: return "UnknownImage";
  case Errc::NoSnapshot: return "NoSnapshot";
  case Errc::StorageError: return "StorageError";
  case Errc::NoSession: return "NoSession";
  case Errc::Unauthorized: return "Unauthorized";
  case Errc::NotFound: return "NotFound";
  case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

std::optional<Errc> errc_from_name(std::string_view name) noexcept {
  for (int i = 0; i <= static_cast<int>(Errc::InvalidArgument); ++i) {
    if (errc_name(static_cast<Errc>(i)) == name) return static_cast<Errc>(i);
  }
  return std::nullopt;
}

} // namespace vilod

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rxp {

enum class ErrorKind {
  // usage
  InvalidArgument,
  // data
  MissingColumn,
  UnparsableCell,
  UnknownTreatment,
  SchemaMismatch,
  InsufficientCompleteRows,
  EmptyArm,
  TooFewObservations,
  TooFewPatients,
  TooFewRows,
  MissingValues,
  MissingFeature,
  InconsistentDimensions,
  InvalidConfig,
  Io,
  // numerical / degenerate
  NoEvents,
  NoComparablePairs,
  NoOutOfBagTrees,
  EmptyBadSet,
  EmptyGoodSet,
  ZeroRealValue,
  ZeroObservedRate,
  DegenerateResample,
};

enum class ErrorCategory { Usage, Data, Numerical };

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::UnparsableCell: return "UnparsableCell";
    case ErrorKind::UnknownTreatment: return "UnknownTreatment";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
    case ErrorKind::InsufficientCompleteRows: return "InsufficientCompleteRows";
    case ErrorKind::EmptyArm: return "EmptyArm";
    case ErrorKind::TooFewObservations: return "TooFewObservations";
    case ErrorKind::TooFewPatients: return "TooFewPatients";
    case ErrorKind::TooFewRows: return "TooFewRows";
    case ErrorKind::MissingValues: return "MissingValues";
    case ErrorKind::MissingFeature: return "MissingFeature";
    case ErrorKind::InconsistentDimensions: return "InconsistentDimensions";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::Io: return "Io";
    case ErrorKind::NoEvents: return "NoEvents";
    case ErrorKind::NoComparablePairs: return "NoComparablePairs";
    case ErrorKind::NoOutOfBagTrees: return "NoOutOfBagTrees";
    case ErrorKind::EmptyBadSet: return "EmptyBadSet";
    case ErrorKind::EmptyGoodSet: return "EmptyGoodSet";
    case ErrorKind::ZeroRealValue: return "ZeroRealValue";
    case ErrorKind::ZeroObservedRate: return "ZeroObservedRate";
    case ErrorKind::DegenerateResample: return "DegenerateResample";
  }
  return "Unknown";
}

constexpr ErrorCategory category_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument:
      return ErrorCategory::Usage;
    case ErrorKind::NoEvents:
    case ErrorKind::NoComparablePairs:
    case ErrorKind::NoOutOfBagTrees:
    case ErrorKind::EmptyBadSet:
    case ErrorKind::EmptyGoodSet:
    case ErrorKind::ZeroRealValue:
    case ErrorKind::ZeroObservedRate:
    case ErrorKind::DegenerateResample:
      return ErrorCategory::Numerical;
    default:
      return ErrorCategory::Data;
  }
}

// Every library failure is an Error carrying a kind; the message holds the
// row/column/feature context.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return category_of(kind_); }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace rxp

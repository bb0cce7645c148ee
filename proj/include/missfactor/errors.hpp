#pragma once

#include <stdexcept>
#include <string>

namespace missfactor {

// Base classes map onto CLI exit codes: InputError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ParseError : InputError {
  using InputError::InputError;
};

struct DuplicateIdError : InputError {
  using InputError::InputError;
};

struct ConfigError : InputError {
  using InputError::InputError;
};

struct EmptyInputError : InputError {
  using InputError::InputError;
};

struct StaleArtifactError : InputError {
  using InputError::InputError;
};

struct NoCompleteFeaturesError : InputError {
  using InputError::InputError;
};

struct SingularDesignError : NumericError {
  using NumericError::NumericError;
};

struct InsufficientDataError : NumericError {
  using NumericError::NumericError;
};

struct DegenerateLabelsError : NumericError {
  using NumericError::NumericError;
};

struct RankError : NumericError {
  using NumericError::NumericError;
};

struct InsufficientMissingnessError : NumericError {
  using NumericError::NumericError;
};

struct HullViolationError : NumericError {
  using NumericError::NumericError;
};

struct BootstrapDegenerateError : NumericError {
  using NumericError::NumericError;
};

struct PriorDegenerateError : NumericError {
  using NumericError::NumericError;
};

struct SingularWeightedDesignError : NumericError {
  using NumericError::NumericError;
};

struct ConvergenceError : NumericError {
  using NumericError::NumericError;
};

struct CalibrationError : NumericError {
  using NumericError::NumericError;
};

struct InfiniteVarianceError : NumericError {
  using NumericError::NumericError;
};

}  // namespace missfactor

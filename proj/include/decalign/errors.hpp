#pragma once

#include <stdexcept>
#include <string>

namespace decalign {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// linalg
struct NonSymmetric : Error {
  using Error::Error;
};
struct NoConvergenceError : Error {
  using Error::Error;
};
struct IndefiniteInput : Error {
  using Error::Error;
};
struct NotPositiveDefinite : Error {
  using Error::Error;
};
struct EmptyInput : Error {
  using Error::Error;
};

// autodiff
struct ShapeMismatch : Error {
  using Error::Error;
};
struct NotScalar : Error {
  using Error::Error;
};
struct DetachedRoot : Error {
  using Error::Error;
};

// gmm
struct DimensionMismatch : Error {
  using Error::Error;
};
struct EmptyComponent : Error {
  using Error::Error;
};
struct TooFewSamples : Error {
  using Error::Error;
};

// mmot
struct MismatchedK : Error {
  using Error::Error;
};
struct NonPositiveLambda : Error {
  using Error::Error;
};

// align-homo
struct MismatchedDims : Error {
  using Error::Error;
};
struct NonPositiveBandwidth : Error {
  using Error::Error;
};

// model
struct SequenceTooShort : Error {
  using Error::Error;
};

// trainer / cli
struct InvalidSpec : Error {
  using Error::Error;
};
struct IncompatibleCheckpoint : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace decalign

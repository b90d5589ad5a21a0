#pragma once

#include <stdexcept>
#include <string>

namespace fi3det {

// Base class for all library errors. Every failure mode documented on the
// public API maps to exactly one of the derived types below so callers can
// discriminate without string matching.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define FI3DET_DEFINE_ERROR(Name) \
  struct Name : Error {           \
    using Error::Error;           \
  };

// geometry
FI3DET_DEFINE_ERROR(EmptyInput)
FI3DET_DEFINE_ERROR(DegenerateGeometry)

// frame ingestion
FI3DET_DEFINE_ERROR(FormatError)
FI3DET_DEFINE_ERROR(ShapeMismatch)
FI3DET_DEFINE_ERROR(NonOrthonormalPose)
FI3DET_DEFINE_ERROR(InsufficientDepth)
FI3DET_DEFINE_ERROR(EmptyMask)

// weighting
FI3DET_DEFINE_ERROR(InvalidSigma)
FI3DET_DEFINE_ERROR(EmptyBox)
FI3DET_DEFINE_ERROR(ZeroNormFeature)

// prototypes and gates
FI3DET_DEFINE_ERROR(DimensionMismatch)
FI3DET_DEFINE_ERROR(UnknownCategory)
FI3DET_DEFINE_ERROR(ZeroNormRow)
FI3DET_DEFINE_ERROR(EmptySupport)
FI3DET_DEFINE_ERROR(NonFiniteLoss)

// losses
FI3DET_DEFINE_ERROR(EmptyRegion)

// evaluation
FI3DET_DEFINE_ERROR(ZeroGroundTruth)
FI3DET_DEFINE_ERROR(EmptySplit)

// synthetic world
FI3DET_DEFINE_ERROR(PlacementFailure)

// sessions
FI3DET_DEFINE_ERROR(InsufficientSupport)
FI3DET_DEFINE_ERROR(CategoryCollision)

#undef FI3DET_DEFINE_ERROR

}  // namespace fi3det

#pragma once

#include <stdexcept>
#include <string>

namespace sketchnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SKETCHNET_DEFINE_ERROR(Name)       \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

// Score parsing and codec.
SKETCHNET_DEFINE_ERROR(ParseError);
SKETCHNET_DEFINE_ERROR(UnsupportedMeter);
SKETCHNET_DEFINE_ERROR(PolyphonyError);
SKETCHNET_DEFINE_ERROR(OverlapError);
SKETCHNET_DEFINE_ERROR(RangeError);
SKETCHNET_DEFINE_ERROR(ArityMismatch);

// Shapes, vocabularies and masks.
SKETCHNET_DEFINE_ERROR(ShapeMismatch);
SKETCHNET_DEFINE_ERROR(VocabError);
SKETCHNET_DEFINE_ERROR(MaskError);
SKETCHNET_DEFINE_ERROR(SpecError);

// Data set construction.
SKETCHNET_DEFINE_ERROR(EmptyCorpus);
SKETCHNET_DEFINE_ERROR(TooFewWindows);
SKETCHNET_DEFINE_ERROR(EmptyInput);

// Models, checkpoints and training.
SKETCHNET_DEFINE_ERROR(CheckpointMismatch);
SKETCHNET_DEFINE_ERROR(DivergenceError);

// Evaluation.
SKETCHNET_DEFINE_ERROR(NoOnsets);

// Service.
SKETCHNET_DEFINE_ERROR(ValidationError);
SKETCHNET_DEFINE_ERROR(ModelNotLoaded);

#undef SKETCHNET_DEFINE_ERROR

}  // namespace sketchnet

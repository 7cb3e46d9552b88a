#pragma once

#include <stdexcept>
#include <string>

namespace songgen {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SONGGEN_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    explicit Name(const std::string& what)  \
        : Error(#Name ": " + what) {}       \
  }

SONGGEN_DEFINE_ERROR(InvalidInput);
SONGGEN_DEFINE_ERROR(RangeError);
SONGGEN_DEFINE_ERROR(DegenerateProfile);
SONGGEN_DEFINE_ERROR(InsufficientData);
SONGGEN_DEFINE_ERROR(ClipTooLong);
SONGGEN_DEFINE_ERROR(MalformedSequence);
SONGGEN_DEFINE_ERROR(EmptyGeneration);
SONGGEN_DEFINE_ERROR(AlignmentError);
SONGGEN_DEFINE_ERROR(CodecMismatch);
SONGGEN_DEFINE_ERROR(DependencyError);
SONGGEN_DEFINE_ERROR(ConfigError);
SONGGEN_DEFINE_ERROR(FormatError);

#undef SONGGEN_DEFINE_ERROR

}  // namespace songgen

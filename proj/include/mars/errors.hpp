#pragma once

#include <stdexcept>
#include <string>

namespace mars {

// Every failure raised by the library derives from mars::Error so callers can
// catch one type; the subclasses let tests and the CLI tell the kinds apart.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define MARS_DEFINE_ERROR(Name)                 \
    struct Name : Error {                       \
        using Error::Error;                     \
    }

MARS_DEFINE_ERROR(DimensionError);
MARS_DEFINE_ERROR(NumericError);
MARS_DEFINE_ERROR(IndexError);
MARS_DEFINE_ERROR(RangeError);
MARS_DEFINE_ERROR(GeometryError);
MARS_DEFINE_ERROR(ModalityError);
MARS_DEFINE_ERROR(ConfigError);
MARS_DEFINE_ERROR(ContextLengthError);
MARS_DEFINE_ERROR(DecodeError);
MARS_DEFINE_ERROR(BlockGeometryError);
MARS_DEFINE_ERROR(EmptyLossError);
MARS_DEFINE_ERROR(InsufficientDataError);
MARS_DEFINE_ERROR(DataError);
MARS_DEFINE_ERROR(FormatError);
MARS_DEFINE_ERROR(SchemaError);
MARS_DEFINE_ERROR(GrammarError);

#undef MARS_DEFINE_ERROR

}  // namespace mars

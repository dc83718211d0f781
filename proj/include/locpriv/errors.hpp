#pragma once

#include <stdexcept>
#include <string>

namespace locpriv {

// Base class for all library errors so callers can catch one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define LOCPRIV_DEFINE_ERROR(Name)                                  \
    struct Name : Error {                                           \
        explicit Name(const std::string& msg) : Error(msg) {}       \
    }

// roadnet
LOCPRIV_DEFINE_ERROR(DuplicateNode);
LOCPRIV_DEFINE_ERROR(DanglingEdge);
LOCPRIV_DEFINE_ERROR(NonPositiveWeight);
LOCPRIV_DEFINE_ERROR(EmptyResult);
LOCPRIV_DEFINE_ERROR(EmptyGraph);
LOCPRIV_DEFINE_ERROR(UnknownNode);

// mechanisms
LOCPRIV_DEFINE_ERROR(EmptySupport);
LOCPRIV_DEFINE_ERROR(Infeasible);
LOCPRIV_DEFINE_ERROR(SupportTooLarge);
LOCPRIV_DEFINE_ERROR(DimensionMismatch);
LOCPRIV_DEFINE_ERROR(InfiniteCost);
LOCPRIV_DEFINE_ERROR(UnknownRow);

// neural
LOCPRIV_DEFINE_ERROR(ShapeMismatch);
LOCPRIV_DEFINE_ERROR(NonFinite);
LOCPRIV_DEFINE_ERROR(OddDimension);
LOCPRIV_DEFINE_ERROR(UnknownParameter);

// vehitrack
LOCPRIV_DEFINE_ERROR(DegenerateSlot);
LOCPRIV_DEFINE_ERROR(MatrixMissing);
LOCPRIV_DEFINE_ERROR(LengthMismatch);

// baselines
LOCPRIV_DEFINE_ERROR(EmptyCorpus);

// harness / io
LOCPRIV_DEFINE_ERROR(MalformedRow);
LOCPRIV_DEFINE_ERROR(EmptyAfterFilter);
LOCPRIV_DEFINE_ERROR(ConfigError);
LOCPRIV_DEFINE_ERROR(IoError);

#undef LOCPRIV_DEFINE_ERROR

}  // namespace locpriv

#pragma once

#include <stdexcept>
#include <string>

namespace mendkit {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or size mismatch between tensors / meshes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Caller passed an out-of-domain value (rate, band, counts, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Degenerate or invalid geometry (non-watertight mesh, zero area, ...).
class GeometryError : public Error {
public:
    using Error::Error;
};

// No cut satisfying the requested volume band could be found.
class FractureError : public Error {
public:
    using Error::Error;
};

// File format or filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

// NaN/Inf encountered in a numeric pipeline.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad command line or config document.
class UsageError : public Error {
public:
    using Error::Error;
};

} // namespace mendkit

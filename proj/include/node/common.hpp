#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace node {

// Error hierarchy. Each failure class is a distinct type so callers (and the
// CLI's exit-code mapping) can tell them apart without parsing messages.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

class MetadataError : public Error {
public:
    MetadataError(const std::string& path, const std::string& what)
        : Error("metadata error for '" + path + "': " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class FitError : public Error {
public:
    using Error::Error;
};

class QualityError : public Error {
public:
    QualityError(const std::string& what, double fraction)
        : Error(what), fraction_(fraction) {}
    double fraction() const noexcept { return fraction_; }

private:
    double fraction_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Checkpoint/architecture mismatch or missing prior-stage state.
class CompatibilityError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace node

#pragma once

#include <stdexcept>
#include <string>

namespace tte {

// Base for every failure the library reports; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Numerical failure of a model fit (rank deficiency, separation, divergence).
class FitError : public Error {
public:
    using Error::Error;
};

class RankDeficientError : public FitError {
public:
    using FitError::FitError;
};

class SeparationError : public FitError {
public:
    using FitError::FitError;
};

}  // namespace tte

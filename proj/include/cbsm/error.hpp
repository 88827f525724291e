#pragma once

#include <stdexcept>
#include <string>

namespace cbsm {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or missing input data (IDX files, dataset containers).
class DataError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or arguments.
class ConfigError : public Error {
public:
    using Error::Error;
};

// A pipeline stage was invoked before the artifact it depends on exists.
class DependencyError : public Error {
public:
    using Error::Error;
};

// Non-finite loss during optimization.
class NumericalError : public Error {
public:
    using Error::Error;
};

// A reference classifier failed to reach its accuracy floor.
class TrainingError : public Error {
public:
    using Error::Error;
};

} // namespace cbsm

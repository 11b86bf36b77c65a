#pragma once

#include <stdexcept>
#include <string>

namespace hitl {

// Base class; the CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Bad arguments or configuration supplied by the caller.
class UsageError : public Error {
  public:
    using Error::Error;
};

// Malformed or inconsistent input data (dataset files, logs, checkpoints).
class DataError : public Error {
  public:
    using Error::Error;
};

// Failures while running (I/O, numerics, remote services).
class RuntimeFailure : public Error {
  public:
    using Error::Error;
};

} // namespace hitl

#pragma once

#include <stdexcept>
#include <string>

namespace rfcam {

// Error categories surfaced to callers. The CLI maps validation-type errors
// to exit code 1 and I/O-type errors to exit code 2.
enum class ErrorKind {
    Validation,
    Format,
    NotFound,
    Io,
    Numerical,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(ErrorKind::Format, what) {}
};

class NotFoundError : public Error {
public:
    explicit NotFoundError(const std::string& what) : Error(ErrorKind::NotFound, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

}  // namespace rfcam

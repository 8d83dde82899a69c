#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moonbeam {

// Root of every error thrown by the library. User-facing problems (bad input
// files, out-of-range values) derive from InputError; broken internal
// invariants derive from InvariantError.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class InvariantError : public Error {
public:
    using Error::Error;
};

class ParseError : public InputError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : InputError(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::size_t offset_;
};

class UnsupportedFormatError : public InputError {
public:
    using InputError::InputError;
};

class OverflowError : public InputError {
public:
    using InputError::InputError;
};

class RangeError : public InputError {
public:
    using InputError::InputError;
};

class ShapeError : public InvariantError {
public:
    using InvariantError::InvariantError;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

} // namespace moonbeam

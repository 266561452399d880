#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gradmap {

// Root of every exception thrown by the library. The CLI maps subclasses
// onto exit codes: InputError/ShapeError/FormatError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class ShapeError : public InputError {
public:
    using InputError::InputError;
};

class FormatError : public InputError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : InputError(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace gradmap

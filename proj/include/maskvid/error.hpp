#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace maskvid {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor dimensions or counts disagree with an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Scene generation could not satisfy the placement constraints.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// Training diverged (non-finite loss) or was misconfigured.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Text did not match the object-prompt answer grammar.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace maskvid

#pragma once

#include <stdexcept>
#include <string>

namespace fsdet {

// Base class for all library errors. Subtypes map onto CLI exit codes:
// ConfigError -> 2, ProtocolError -> 3, everything else -> 1.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct ProtocolError : Error {
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

}  // namespace fsdet

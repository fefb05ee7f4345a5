#pragma once

#include <stdexcept>
#include <string>

namespace emotalk {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a speech input is shorter than the first conv kernel.
struct InputTooShortError : std::runtime_error {
    explicit InputTooShortError(const std::string& what) : std::runtime_error(what) {}
};

struct AssemblyError : std::runtime_error {
    explicit AssemblyError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct CheckpointError : std::runtime_error {
    enum class Kind { bad_magic, bad_version, truncated, tensor_mismatch };
    Kind kind;
    CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

} // namespace emotalk

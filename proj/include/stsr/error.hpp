#pragma once

#include <stdexcept>
#include <string>

namespace stsr {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / dimension mismatches between tensors or against a configured grid.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Value out of the documented range (bad beta bounds, epoch out of range, ...).
struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Config file problems: unknown keys, unparsable values, failed validation.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Container file problems, split so callers can distinguish the failure mode.
struct ContainerError : Error {
    explicit ContainerError(const std::string& msg) : Error(msg) {}
};
struct ContainerMagicError : ContainerError {
    explicit ContainerMagicError(const std::string& msg) : ContainerError(msg) {}
};
struct ContainerVersionError : ContainerError {
    explicit ContainerVersionError(const std::string& msg) : ContainerError(msg) {}
};
struct ContainerTruncatedError : ContainerError {
    explicit ContainerTruncatedError(const std::string& msg) : ContainerError(msg) {}
};

// Filesystem-level failures (missing file, unwritable path).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace stsr

#pragma once

#include <stdexcept>
#include <string>

namespace drfpn {

// Incompatible tensor extents (wrong channel count, non-2:1 pyramid levels, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// A caller violated an operation contract (non-scalar loss, reused tape, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Malformed weight file or other on-disk artifact.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

// Bad run configuration (unknown key, indivisible image size, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

}  // namespace drfpn

#pragma once

#include <stdexcept>
#include <string>

namespace minelab {

/// Bad wiring or config (CLI exit code 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

/// Bad call argument (CLI exit code 2).
struct ArgumentError : std::invalid_argument {
    explicit ArgumentError(const std::string& m) : std::invalid_argument(m) {}
};

/// Divergence / non-finite values (CLI exit code 3).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

/// Resume-state mismatch (CLI exit code 4).
struct ResumeError : std::runtime_error {
    explicit ResumeError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace minelab

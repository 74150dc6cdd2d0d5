#pragma once

#include <stdexcept>
#include <string>

namespace sugar {

/// Rejected input: a caller violated an operation's preconditions.
struct InvalidInput : std::invalid_argument {
    explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

/// Numerical divergence (non-finite loss, failed optimization).
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// File I/O or parse failure.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sugar

#pragma once

#include <stdexcept>
#include <string>

namespace dpc {

// Violated precondition or malformed input: wrong shapes, bad config keys,
// mismatched archives. Maps to CLI exit code 1.
class ContractViolation : public std::invalid_argument {
public:
    explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// Numeric failure state: NaN/Inf produced by an operation, zero-norm cosine
// input, diverged loss. Maps to CLI exit code 2.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace dpc

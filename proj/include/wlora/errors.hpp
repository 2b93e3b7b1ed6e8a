#pragma once

#include <stdexcept>
#include <string>

namespace wlora {

// Precondition or argument violation (bad K, bad rank, duplicate slot, ...).
class ContractError : public std::invalid_argument {
public:
    explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Shape disagreement between operands. Messages name both shapes.
class DimensionError : public ContractError {
public:
    explicit DimensionError(const std::string& what) : ContractError(what) {}
};

// Operation issued in a state that does not admit it (double backward,
// stepping frozen gates, consumed tape).
class StateError : public std::logic_error {
public:
    explicit StateError(const std::string& what) : std::logic_error(what) {}
};

// Numerically degenerate input (rank-deficient QR, empty active set).
class DegeneracyError : public std::runtime_error {
public:
    explicit DegeneracyError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace wlora

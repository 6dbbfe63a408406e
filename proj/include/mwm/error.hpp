#pragma once

#include <stdexcept>
#include <string>

namespace mwm {

// Violated precondition on shapes, ranges or call order.
class ContractError : public std::invalid_argument {
public:
    explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid or inconsistent configuration values.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Numerical failure at run time (NaN loss, infeasible plan, ...).
class RuntimeError : public std::runtime_error {
public:
    explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mwm

#pragma once

#include <stdexcept>
#include <string>

namespace thermoloop {

/// Raised when a caller breaks a documented precondition (shapes, ranges, sizes).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a numerical procedure cannot produce a usable result
/// (NaN propagation, solver divergence, step-size underflow).
class NumericalFailure : public std::runtime_error {
 public:
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace thermoloop

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gmvit {

/// Thrown when an operation receives tensors with incompatible shapes or
/// otherwise invalid arguments.
class ShapeError : public std::invalid_argument {
public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Thrown when a numeric invariant is violated (NaN/Inf, non-stochastic
/// distribution input, gradient-check failure).
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void require_numeric(bool ok, const std::string& msg) {
  if (!ok) throw NumericError(msg);
}

inline std::string str(std::int64_t v) { return std::to_string(v); }

}  // namespace detail
}  // namespace gmvit

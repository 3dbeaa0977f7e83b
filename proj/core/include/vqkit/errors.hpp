#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace vqkit {

// Caller broke a documented precondition (shape mismatch, bad parameter range).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// A NaN or Inf appeared in a forward value or gradient.
class NumericFailure : public std::runtime_error {
 public:
  explicit NumericFailure(const std::string& what, std::optional<std::size_t> node = std::nullopt)
      : std::runtime_error(node ? what + " (node " + std::to_string(*node) + ")" : what), node_(node) {}

  std::optional<std::size_t> node() const noexcept { return node_; }

 private:
  std::optional<std::size_t> node_;
};

// Input is well-formed but geometrically unusable, e.g. a zero vector under cosine distance.
class DegenerateInput : public std::domain_error {
 public:
  explicit DegenerateInput(const std::string& what) : std::domain_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace vqkit

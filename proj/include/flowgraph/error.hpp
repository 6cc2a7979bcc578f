#pragma once

#include <stdexcept>
#include <string>

namespace flowgraph {

// Caller supplied an argument that violates an operation's contract.
class PreconditionError : public std::invalid_argument {
 public:
  explicit PreconditionError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed dataset, prior, checkpoint or config record.
class ParseError : public std::invalid_argument {
 public:
  explicit ParseError(const std::string& what) : std::invalid_argument(what) {}
};

// Request exceeds a fixed capacity (N_max, enumerable state space, ...).
class CapacityError : public std::length_error {
 public:
  explicit CapacityError(const std::string& what) : std::length_error(what) {}
};

// Argument outside the mathematical domain of a formula (e.g. t >= 1).
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// Numerical failure during a long-running procedure (non-finite loss, KL blow-up).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw PreconditionError(msg);
}

}  // namespace flowgraph

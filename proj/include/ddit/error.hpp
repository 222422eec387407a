#pragma once

#include <stdexcept>
#include <string>

namespace ddit {

// Malformed input document (JSON syntax, missing/typed fields).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Document parsed but violates a domain invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A (resolution, dop) pair or resolution name that is not in the table.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Misuse of an API object, e.g. releasing a handle twice.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Queue with utilization >= 1 has no steady state.
class SaturationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Internal consistency broken; indicates a bug, not bad input.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace ddit

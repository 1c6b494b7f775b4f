#pragma once

#include <stdexcept>
#include <string>

namespace carl {

// Error taxonomy shared across the library. Everything derives from
// std::runtime_error so callers can catch coarsely; the CLI maps
// ValidationError/PairingError to exit code 2 and check failures to 3.

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PreconditionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedModeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StructuralError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InsufficientCoverageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PairingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace carl

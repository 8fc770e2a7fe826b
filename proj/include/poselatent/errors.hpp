#pragma once

#include <stdexcept>
#include <string>

namespace poselatent {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when a normalization would divide by a (near) zero norm, or a
// non-finite value shows up where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RenderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EstimationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RefinementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Configuration / artifact validation failure. `field` names the offending key.
struct ValidationError : std::invalid_argument {
  ValidationError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field(std::move(field)) {}
  std::string field;
};

}  // namespace poselatent

#pragma once

#include <stdexcept>
#include <string>

namespace poul {

// Dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input document, config or spec.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Lookup of a policy / context / action / atom id that does not exist.
class UnknownIdError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Non-finite values or aborted optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A model asked to predict for a policy it has no representation for.
class UnsupportedPolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metric undefined for the given data (empty group, zero normalizer...).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace poul

#pragma once

#include <stdexcept>
#include <string>

namespace fracfactor {

// Invalid arguments use std::invalid_argument, unstable polynomials use
// std::domain_error and out-of-table integration orders std::out_of_range.

/// An estimator could not produce a usable result (rank deficiency,
/// optimizer breakdown, degenerate input).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a domain requirement (non-positive value under a log
/// transform, malformed CSV cell, missing value).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fracfactor

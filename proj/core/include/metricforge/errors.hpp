#pragma once

#include <stdexcept>
#include <string>

namespace metricforge {

// Base of every error the library throws. The category maps onto the CLI
// exit codes: contract violations are usage failures (1), data and shape
// errors data failures (2), numeric errors numeric failures (3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (bad config, invalid batch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input data: audio, manifests, trial lists.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in values or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace metricforge

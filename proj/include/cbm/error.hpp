#ifndef CBM_ERROR_HPP
#define CBM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace cbm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user configuration (bad hyperparameters, grids, CLI arguments).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing on-disk data, or values violating a data invariant.
class DataError : public Error {
 public:
  using Error::Error;
};

// Optimization produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbm

#endif  // CBM_ERROR_HPP

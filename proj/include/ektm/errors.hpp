#pragma once

#include <stdexcept>
#include <string>

namespace ektm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an operator's algebra.
struct ShapeError : Error {
  using Error::Error;
};

// Bad values: non-finite input, domain violations (log of non-positive).
struct ValueError : Error {
  using Error::Error;
};

// Invalid configuration, unknown keys, out-of-range hyperparameters.
struct ConfigError : Error {
  using Error::Error;
};

// Ingestion and schema violations; messages carry row/column context.
struct DataError : Error {
  using Error::Error;
};

// Numeric failure at runtime: non-finite loss, failed gradient check.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace ektm

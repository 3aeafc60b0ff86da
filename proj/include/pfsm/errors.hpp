#pragma once

#include <stdexcept>

namespace pfsm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape mismatches and malformed op arguments.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf or other numeric breakdown detected at runtime.
struct NumericError : Error {
  using Error::Error;
};

// Bad values in user-facing inputs (labels, dataset specs, loss weights).
struct ValidationError : Error {
  using Error::Error;
};

// Config file problems: syntax, unknown keys, out-of-range fields.
struct ConfigError : Error {
  using Error::Error;
};

// Federation contract violations (payload keys, missing params).
struct ProtocolError : Error {
  using Error::Error;
};

// Binary file format problems (checkpoints, sample files).
struct FormatError : Error {
  using Error::Error;
};

}  // namespace pfsm

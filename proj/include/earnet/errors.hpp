#pragma once

#include <stdexcept>
#include <string>

namespace earnet {

// Incompatible tensor extents.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid layer or model configuration (group divisibility, odd kernel, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated an operation precondition (non-scalar loss, wrong mode).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad user-supplied data: out-of-range labels, undecodable images, bad CSV.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf appeared where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Weight file could not be loaded.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File or socket I/O failed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace earnet

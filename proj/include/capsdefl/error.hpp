#pragma once

#include <stdexcept>
#include <string>

namespace capsdefl {

// Malformed or inconsistent configuration: shapes, hyperparameters, config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An API was called outside its contract (bad index, wrong model kind, ...).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file on disk does not match the expected binary/text layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical or I/O failure while running (NaN loss, unwritable output, ...).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace capsdefl

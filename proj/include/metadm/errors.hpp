#pragma once

#include <stdexcept>
#include <string>

namespace metadm {

// Bad user input: config files, flag values, impossible requests.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk data does not match its digest or declared structure.
class DataIntegrityError : public std::runtime_error {
 public:
  explicit DataIntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or a numerically failed run.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape mismatch; message names the offending axis.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace metadm

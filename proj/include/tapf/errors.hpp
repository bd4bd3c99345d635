#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tapf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or shape mismatch; message names the operation and both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid or unknown configuration value; message names the key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where one is not allowed; message names the term.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Integer index outside its valid range; message names level and value.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Input length is not divisible by the model's compression factor; the
// caller is expected to zero-pad before encoding.
class PaddingError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized data. Carries the byte offset of the defect.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, std::size_t offset)
      : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace tapf

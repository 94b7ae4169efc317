#pragma once

#include <stdexcept>
#include <string>

namespace lcflow {

// All library failures derive from Error; the C API maps each subclass to
// its own status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes or layouts do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A numeric operation left its domain (log of non-positive, overflow, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// File parsed but its contents are malformed or truncated.
class CorruptFileError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace lcflow

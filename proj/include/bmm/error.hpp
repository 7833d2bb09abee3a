#pragma once

#include <stdexcept>
#include <string>

namespace bmm {

// Every failure raised by the library derives from Error so callers can
// catch one type at the command boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

}  // namespace bmm

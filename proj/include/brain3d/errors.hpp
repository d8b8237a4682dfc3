#pragma once

#include <stdexcept>
#include <string>

namespace brain3d {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorKind { kBadMagic, kTruncated, kDimensionOverflow, kTrailingBytes, kIo };

class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Mathematical precondition violated (empty input, zero supervised positions, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ProvenanceError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace brain3d

#pragma once

#include <stdexcept>
#include <string>

namespace mudeep {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A window/stride/pad combination produces an empty output.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents (PPM, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Missing files, bad datasets, violated evaluation protocol.
class DataError : public Error {
 public:
  using Error::Error;
};

// An argument value outside its documented domain (label index, dropout rate).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mudeep

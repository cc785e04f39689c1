#pragma once

#include <stdexcept>
#include <string>

namespace pyrec {

/// Incompatible tensor extents (e.g. matmul inner dimensions).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// A setting that cannot describe a valid model or dataset.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// An API was driven outside its documented protocol.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

/// Caller-supplied data is out of range (vocabulary ids, coordinates, ...).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Scene generation could not satisfy its invariants within the retry budget.
class GenError : public std::runtime_error {
 public:
  explicit GenError(const std::string& what) : std::runtime_error(what) {}
};

/// File I/O failure.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Optimization aborted (non-finite loss and similar).
class TrainError : public std::runtime_error {
 public:
  explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pyrec

#pragma once

#include <stdexcept>
#include <string>

namespace trajcaps {

// Error categories map one-to-one onto the CLI exit codes.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

class OutOfBoundsError : public std::out_of_range {
 public:
  explicit OutOfBoundsError(const std::string& what) : std::out_of_range(what) {}
};

}  // namespace trajcaps

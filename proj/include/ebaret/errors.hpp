#pragma once

#include <stdexcept>
#include <string>

namespace ebaret {

// Bad argument value (non-finite bid, out-of-domain parameter, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Configuration that is internally inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

// alpha_b + alpha_c == 0.
class InvalidMultipliers : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fewer distinct scores than requested expert levels.
class DegenerateBinning : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exhaustive enumeration requested on too many items.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ebaret

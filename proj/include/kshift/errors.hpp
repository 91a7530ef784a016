#pragma once

#include <stdexcept>
#include <string>

namespace kshift {

/// Bad argument values or shapes handed to an operation.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent or out-of-domain configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A statistical test whose statistic is undefined for the given samples.
class UndefinedTest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kshift

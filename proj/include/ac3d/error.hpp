#pragma once

#include <stdexcept>
#include <string>

namespace ac3d {

/// Base for every error caused by bad input data (malformed files, invalid
/// cameras, degenerate numerics). The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or configuration supplied by the caller (exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ac3d

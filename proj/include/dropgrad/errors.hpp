#pragma once

#include <stdexcept>
#include <string>

namespace dropgrad {

// Process exit codes used by the CLI: 0 ok, 2 config, 3 numeric, 4 I/O.
enum class ExitCode : int {
  ok = 0,
  failure = 1,
  config = 2,
  numeric = 3,
  io = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const { return code_; }

 private:
  ExitCode code_;
};

// Invalid run configuration, flags, or schema violations.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::config, what) {}
};

// Shape/extent contract violations between tensors, layers, or datasets.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ExitCode::config, what) {}
};

// Non-finite values, tolerance breaches, corrupt caches, degenerate inputs.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

// Missing/truncated/corrupt files, unwritable outputs.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ExitCode::io, what) {}
};

}  // namespace dropgrad

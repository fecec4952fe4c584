#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evsve {

// Exit codes surfaced by the command-line tool.
enum class ExitCode : int { kOk = 0, kInput = 2, kInvariant = 3, kNumeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

class ConfigError : public InputError {
 public:
  explicit ConfigError(const std::string& what) : InputError("config: " + what) {}
};

class DimensionError : public InputError {
 public:
  explicit DimensionError(const std::string& what) : InputError("dimension: " + what) {}
};

class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : InputError("parse error at byte " + std::to_string(byte_offset) + ": " + what),
        offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what) : Error(what, ExitCode::kInvariant) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, ExitCode::kNumeric) {}
};

// Too few or collinear events to delineate a particle footprint.
class DegenerateObservation : public NumericError {
 public:
  explicit DegenerateObservation(const std::string& what)
      : NumericError("degenerate observation: " + what) {}
};

class ProjectionError : public NumericError {
 public:
  explicit ProjectionError(const std::string& what) : NumericError("projection: " + what) {}
};

class IllConditioned : public NumericError {
 public:
  explicit IllConditioned(const std::string& what) : NumericError("ill-conditioned: " + what) {}
};

}  // namespace evsve

#pragma once

#include <stdexcept>
#include <string>

namespace wiflex {

/// Base for every error the library raises. `code()` is a stable,
/// machine-parsable identifier used by the CLI (`code: message`).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error("validation_error", m) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& m) : Error("format_error", m) {}
};

class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& m) : Error("corruption_error", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

}  // namespace wiflex

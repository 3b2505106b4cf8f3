#pragma once

#include <stdexcept>
#include <string>

namespace grecall {

// Config file problems: unknown keys, bad values, missing config file.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structured-file parse failures; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, int line, const std::string& msg)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + msg),
        path_(path),
        line_(line) {}
  const std::string& path() const { return path_; }
  int line() const { return line_; }

 private:
  std::string path_;
  int line_;
};

// A required input file does not exist.
class NotFoundError : public std::runtime_error {
 public:
  explicit NotFoundError(const std::string& path)
      : std::runtime_error("not found: " + path) {}
};

// A pipeline stage was invoked before the stage that produces its input.
class PrereqError : public std::runtime_error {
 public:
  explicit PrereqError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric divergence (NaN/Inf) detected during training or optimization.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace grecall

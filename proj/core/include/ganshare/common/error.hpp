#pragma once

#include <stdexcept>
#include <string>

namespace ganshare {

// Error categories used across the pipeline. The CLI maps these onto exit
// codes and one-line machine-parsable categories.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct IntegrityError : Error {
  explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

struct ProtocolError : Error {
  explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace ganshare

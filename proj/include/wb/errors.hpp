#pragma once
#include <stdexcept>
#include <string>

namespace wb {

// Error taxonomy used across the workbench. The CLI maps these onto
// machine-parsable stderr prefixes and exit codes:
//   ConfigError / DataError / ParseError -> exit 1
//   NumericError                         -> exit 2
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace wb

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gazeprior {

enum class ErrorKind {
  kDimension,
  kDomain,
  kConfig,
  kRange,
  kLex,
  kData,
  kFormat,
  kVersion,
  kSchema,
  kLength,
  kNonFinite,
  kIo,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library. what() is "<kind>: <message>" and
// never contains a newline, so the CLI can print it as one line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace gazeprior

#include "gazeprior/error.hpp"

#include <algorithm>

namespace gazeprior {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension_error";
    case ErrorKind::kDomain: return "domain_error";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kRange: return "range_error";
    case ErrorKind::kLex: return "lex_error";
    case ErrorKind::kData: return "data_error";
    case ErrorKind::kFormat: return "format_error";
    case ErrorKind::kVersion: return "version_error";
    case ErrorKind::kSchema: return "schema_error";
    case ErrorKind::kLength: return "length_error";
    case ErrorKind::kNonFinite: return "non_finite";
    case ErrorKind::kIo: return "io_error";
  }
  return "error";
}

namespace {
std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}
}  // namespace

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + one_line(message)),
      kind_(kind),
      message_(one_line(message)) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace gazeprior

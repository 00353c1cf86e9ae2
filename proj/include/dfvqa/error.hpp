#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dfvqa {

enum class ErrorKind {
  config,       // bad run configuration or CLI usage
  data,         // malformed or inconsistent input files
  transport,    // network failure, retries exhausted
  permanent,    // remote rejected the request (HTTP 4xx)
  capability,   // provider cannot perform the requested operation
  undefined,    // metric undefined for the given input
  validation,   // request value out of range
  conflict,     // duplicate write to an immutable record
  not_found,
  forbidden,
  io,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::transport: return "transport";
    case ErrorKind::permanent: return "permanent";
    case ErrorKind::capability: return "capability";
    case ErrorKind::undefined: return "undefined";
    case ErrorKind::validation: return "validation";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::forbidden: return "forbidden";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// True when retrying the same request may succeed.
  bool retriable() const noexcept { return kind_ == ErrorKind::transport; }

 private:
  ErrorKind kind_;
};

/// Transport failure after all retries; carries one entry per attempt.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, std::vector<std::string> attempts)
      : Error(ErrorKind::transport, what), attempts_(std::move(attempts)) {}

  const std::vector<std::string>& attempts() const noexcept { return attempts_; }

 private:
  std::vector<std::string> attempts_;
};

/// Process exit code for the CLI: 1 config, 2 data, 3 transport.
inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 1;
    case ErrorKind::transport:
    case ErrorKind::permanent: return 3;
    default: return 2;
  }
}

}  // namespace dfvqa

#pragma once

#include <chrono>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qvote {

enum class Errc {
  invalid_argument,
  parse_error,
  invalid_key,
  key_too_short,
  key_reused,
  session_failed,
  channel_error,
  payload_too_large,
  malformed_message,
  not_found,
  bad_key,
  invalid_receipt,
  io_error,
};

std::string_view to_string(Errc code) noexcept;

/// Base exception for every failure the library reports. The code is the
/// stable part; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// QASM documents report the 1-based line of the first offending statement.
class ParseError : public Error {
 public:
  enum class Kind { header, syntax, undeclared_register, out_of_range, unsupported_statement, gate_order };

  ParseError(Kind kind, std::size_t line, const std::string& detail);

  Kind kind() const noexcept { return kind_; }
  std::size_t line() const noexcept { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

std::string_view to_string(ParseError::Kind kind) noexcept;

class ChannelError : public Error {
 public:
  explicit ChannelError(const std::string& what,
                        std::chrono::milliseconds retry_after = std::chrono::milliseconds{1000})
      : Error(Errc::channel_error, what), retry_after_(retry_after) {}

  std::chrono::milliseconds retry_after() const noexcept { return retry_after_; }

 private:
  std::chrono::milliseconds retry_after_;
};

}  // namespace qvote

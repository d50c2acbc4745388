#include "qvote/error.hpp"

namespace qvote {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::parse_error: return "parse-error";
    case Errc::invalid_key: return "invalid-key";
    case Errc::key_too_short: return "key-too-short";
    case Errc::key_reused: return "key-reused";
    case Errc::session_failed: return "session-failed";
    case Errc::channel_error: return "channel-error";
    case Errc::payload_too_large: return "payload-too-large";
    case Errc::malformed_message: return "malformed-message";
    case Errc::not_found: return "not-found";
    case Errc::bad_key: return "bad-key";
    case Errc::invalid_receipt: return "invalid-receipt";
    case Errc::io_error: return "io-error";
  }
  return "unknown";
}

std::string_view to_string(ParseError::Kind kind) noexcept {
  switch (kind) {
    case ParseError::Kind::header: return "header";
    case ParseError::Kind::syntax: return "syntax";
    case ParseError::Kind::undeclared_register: return "undeclared-register";
    case ParseError::Kind::out_of_range: return "out-of-range";
    case ParseError::Kind::unsupported_statement: return "unsupported-statement";
    case ParseError::Kind::gate_order: return "gate-order";
  }
  return "unknown";
}

ParseError::ParseError(Kind kind, std::size_t line, const std::string& detail)
    : Error(Errc::parse_error,
            "parse-error(" + std::string(to_string(kind)) + ") at line " + std::to_string(line) + ": " + detail),
      kind_(kind),
      line_(line) {}

}  // namespace qvote

#pragma once

#include <span>
#include <string>
#include <string_view>

#include "qvote/bits.hpp"

namespace qvote {

std::string base64_encode(std::span<const std::uint8_t> data);
std::string base64_encode(std::string_view data);
/// Strict RFC 4648 decoding with padding; throws Errc::malformed_message.
Bytes base64_decode(std::string_view text);

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_text(std::span<const std::uint8_t> b) { return std::string(b.begin(), b.end()); }

}  // namespace qvote

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace qvote {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> data);
Digest sha256(std::string_view data);

/// 64 lowercase hex characters.
std::string to_hex(const Digest& digest);
/// Accepts either case; throws Errc::invalid_receipt on anything else.
Digest digest_from_hex(std::string_view hex);

/// Constant-time comparison.
bool digest_equal(const Digest& a, const Digest& b) noexcept;

}  // namespace qvote

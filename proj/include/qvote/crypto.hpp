#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "qvote/bb84.hpp"
#include "qvote/bits.hpp"
#include "qvote/digest.hpp"

namespace qvote::crypto {

struct KeyOrigin {
  enum class Kind { qkd_session, split };
  enum class Half { none, vote, id };

  Kind kind = Kind::qkd_session;
  std::string session_id;
  Half half = Half::none;
};

/// Key material from a QKD session. Move-only and single-use: the first
/// apply() consumes it, any further apply() throws Errc::key_reused.
class SymmetricKey {
 public:
  SymmetricKey(BitString bits, KeyOrigin origin);

  SymmetricKey(SymmetricKey&& other) noexcept;
  SymmetricKey& operator=(SymmetricKey&& other) noexcept;
  SymmetricKey(const SymmetricKey&) = delete;
  SymmetricKey& operator=(const SymmetricKey&) = delete;

  const BitString& bits() const noexcept { return bits_; }
  std::size_t size() const noexcept { return bits_.size(); }
  const KeyOrigin& origin() const noexcept { return origin_; }
  bool consumed() const noexcept { return consumed_; }

  Bytes apply(std::span<const std::uint8_t> message);

 private:
  BitString bits_;
  KeyOrigin origin_;
  bool consumed_ = false;
};

/// Bit i of the output is message bit i XOR key bit (i mod |key|); message
/// bytes are read MSB first. Self-inverse.
Bytes xor_apply(std::span<const std::uint8_t> message, const BitString& key);
BitString xor_apply(const BitString& message, const BitString& key);

/// First `vote_key_bits` sifted bits become K_vote, the next `id_key_bits` K_id.
std::pair<SymmetricKey, SymmetricKey> split_key(const bb84::SiftedKey& sifted, std::size_t vote_key_bits,
                                                std::size_t id_key_bits, const std::string& session_id = {});

struct Receipt {
  Digest digest{};
  std::string session_id;

  std::string hex() const { return to_hex(digest); }
};

/// SHA-256 over e_vote || e_id, no separator or length prefix.
Digest receipt_hash(std::span<const std::uint8_t> e_vote, std::span<const std::uint8_t> e_id);

/// SHA-256 of the key bits packed MSB first, zero-padded to a byte.
Digest key_digest(const BitString& bits);
Digest key_digest(const SymmetricKey& key);

}  // namespace qvote::crypto

#include "qvote/crypto.hpp"

#include "qvote/error.hpp"

namespace qvote::crypto {

SymmetricKey::SymmetricKey(BitString bits, KeyOrigin origin) : bits_(std::move(bits)), origin_(std::move(origin)) {
  if (bits_.empty()) throw Error(Errc::invalid_key, "symmetric key must not be empty");
}

SymmetricKey::SymmetricKey(SymmetricKey&& other) noexcept
    : bits_(std::move(other.bits_)), origin_(std::move(other.origin_)), consumed_(other.consumed_) {
  other.consumed_ = true;
}

SymmetricKey& SymmetricKey::operator=(SymmetricKey&& other) noexcept {
  bits_ = std::move(other.bits_);
  origin_ = std::move(other.origin_);
  consumed_ = other.consumed_;
  other.consumed_ = true;
  return *this;
}

Bytes SymmetricKey::apply(std::span<const std::uint8_t> message) {
  if (consumed_) throw Error(Errc::key_reused, "symmetric key already used");
  consumed_ = true;
  return xor_apply(message, bits_);
}

Bytes xor_apply(std::span<const std::uint8_t> message, const BitString& key) {
  if (key.empty()) throw Error(Errc::invalid_key, "cannot XOR with an empty key");
  Bytes out(message.begin(), message.end());
  const std::size_t k = key.size();
  std::size_t j = 0;
  for (auto& byte : out) {
    std::uint8_t mask = 0;
    for (int t = 7; t >= 0; --t) {
      mask |= static_cast<std::uint8_t>(key[j] << t);
      if (++j == k) j = 0;
    }
    byte ^= mask;
  }
  return out;
}

BitString xor_apply(const BitString& message, const BitString& key) {
  if (key.empty()) throw Error(Errc::invalid_key, "cannot XOR with an empty key");
  BitString out(message.size());
  for (std::size_t i = 0; i < message.size(); ++i) out.set(i, message[i] ^ key[i % key.size()]);
  return out;
}

std::pair<SymmetricKey, SymmetricKey> split_key(const bb84::SiftedKey& sifted, std::size_t vote_key_bits,
                                                std::size_t id_key_bits, const std::string& session_id) {
  if (vote_key_bits == 0 || id_key_bits == 0) throw Error(Errc::invalid_argument, "split lengths must be >= 1");
  if (sifted.size() < vote_key_bits + id_key_bits)
    throw Error(Errc::key_too_short, "sifted key has " + std::to_string(sifted.size()) + " bits, need " +
                                         std::to_string(vote_key_bits + id_key_bits));
  using Kind = KeyOrigin::Kind;
  using Half = KeyOrigin::Half;
  return {SymmetricKey(sifted.bits.slice(0, vote_key_bits), {Kind::split, session_id, Half::vote}),
          SymmetricKey(sifted.bits.slice(vote_key_bits, id_key_bits), {Kind::split, session_id, Half::id})};
}

Digest receipt_hash(std::span<const std::uint8_t> e_vote, std::span<const std::uint8_t> e_id) {
  if (e_vote.empty() || e_id.empty()) throw Error(Errc::invalid_argument, "receipt inputs must be non-empty");
  Bytes joined;
  joined.reserve(e_vote.size() + e_id.size());
  joined.insert(joined.end(), e_vote.begin(), e_vote.end());
  joined.insert(joined.end(), e_id.begin(), e_id.end());
  return sha256(joined);
}

Digest key_digest(const BitString& bits) {
  if (bits.empty()) throw Error(Errc::invalid_key, "cannot digest an empty key");
  return sha256(bits.pack());
}

Digest key_digest(const SymmetricKey& key) { return key_digest(key.bits()); }

}  // namespace qvote::crypto
